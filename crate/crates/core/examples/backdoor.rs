//! Stage-one accuracy with and without clients that upload reversed updates.

use fedsparse::config::ExperimentConfig;
use fedsparse::federation::Federation;

fn stage1(ratio: f64) -> fedsparse::Result<(f64, Vec<usize>)> {
    let mut cfg = ExperimentConfig::from_toml(include_str!("../../../configs/desk.toml"))?;
    cfg.federation.attack_ratio = ratio;
    let mut fed = Federation::new(cfg)?;
    fed.run_stage1()?;
    Ok((fed.stage1_accuracy.unwrap_or(f64::NAN), fed.malicious_clients()))
}

fn main() -> fedsparse::Result<()> {
    for ratio in [0.0, 0.1, 0.2, 0.3] {
        let (acc, malicious) = stage1(ratio)?;
        println!("attack ratio {ratio:.1}: stage-1 accuracy {acc:.3}, malicious clients {malicious:?}");
    }
    Ok(())
}
