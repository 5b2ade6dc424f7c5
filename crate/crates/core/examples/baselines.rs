//! Compares the trainable share and accuracy of full fine-tuning, layer-freeze
//! fine-tuning and the two-stage method on a short run.

use fedsparse::config::{ExperimentConfig, Method};
use fedsparse::federation::{initial_model, Federation};

fn main() -> fedsparse::Result<()> {
    let base = ExperimentConfig::from_toml(include_str!("../../../configs/desk.toml"))?;
    println!("method  trainable      share  accuracy  uploaded MB");
    for method in [Method::Ft, Method::Lfft, Method::Fedms] {
        let mut cfg = base.clone();
        cfg.federation.method = method;
        cfg.federation.rounds_stage1 = 4;
        cfg.federation.rounds_stage2 = 4;
        let p = initial_model(&cfg)?.trainable_proportion();
        let mut fed = Federation::new(cfg)?;
        fed.run()?;
        println!(
            "{:<6} {:>10} {:>9.3}% {:>9.3} {:>12.2}",
            method.name(),
            p.trainable,
            100.0 * p.value(),
            fed.latest_accuracy().unwrap_or(f64::NAN),
            fed.ledger.total_bytes() as f64 / 1e6
        );
    }
    Ok(())
}
