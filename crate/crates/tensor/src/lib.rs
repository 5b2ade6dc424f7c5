//! Dense `f32` tensors, a define-by-run autodiff tape and an AdamW optimizer.
//!
//! Sized for small transformer encoders trained on a CPU: every op is a plain
//! loop except matrix products, which go through `matrixmultiply`.

mod error;
mod kernels;
mod optim;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{Adam, AdamConfig, Moments};
pub use tape::{BatchNormMode, BatchStats, Gradients, Tape, Var, BN_EPS};
pub use tensor::{numel, Tensor, TensorId};
