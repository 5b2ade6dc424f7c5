//! Runs the two-stage method on the desk setting: shared adapters first, then
//! per-client mixtures with progressively activated local adapters.

use fedsparse::config::ExperimentConfig;
use fedsparse::federation::Federation;

fn main() -> fedsparse::Result<()> {
    let mut cfg = ExperimentConfig::from_toml(include_str!("../../../configs/desk.toml"))?;
    cfg.federation.rounds_stage1 = 6;
    cfg.federation.rounds_stage2 = 6;
    let mut fed = Federation::new(cfg)?;
    while !fed.is_done() {
        let rows = fed.step()?;
        if let Some(server) = rows.iter().find(|r| r.is_server()) {
            let lambda = server.lambda_mean.map_or(String::new(), |l| format!("  mean lambda {l:.3}"));
            println!("stage {} round {:>2}: accuracy {:.3}{lambda}", server.stage, server.round, server.val_accuracy);
        }
    }
    println!("shared-expert accuracy at the end of stage 1: {:.3}", fed.stage1_accuracy.unwrap_or(f64::NAN));
    for a in &fed.activations {
        println!("round {}: client {} activated layer {}", a.round, a.client, a.layer);
    }
    Ok(())
}
