pub mod aggregate;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod data;
pub mod encoder;
pub mod error;
pub mod federation;
pub mod lora;
pub mod mofm;
pub mod nn;
pub mod rng;
pub mod runner;
pub mod sal;

pub use error::{Error, Result};
