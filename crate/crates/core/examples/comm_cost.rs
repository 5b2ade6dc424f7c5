//! Payload totals and transfer times at several bandwidths for each method.

use fedsparse::config::{ExperimentConfig, Method};
use fedsparse::federation::{comm_time, Federation};

fn main() -> fedsparse::Result<()> {
    let base = ExperimentConfig::from_toml(include_str!("../../../configs/desk.toml"))?;
    let mut totals = Vec::new();
    for method in [Method::Ft, Method::Lfft, Method::Fedms] {
        let mut cfg = base.clone();
        cfg.federation.method = method;
        cfg.federation.rounds_stage1 = 2;
        cfg.federation.rounds_stage2 = 2;
        let mut fed = Federation::new(cfg)?;
        fed.run()?;
        let bytes = fed.ledger.total_bytes();
        print!("{:<6} {:>12} bytes", method.name(), bytes);
        for mb in &base.output.bandwidths_mb {
            print!("  {:>9.3} s @ {mb} MB/s", comm_time(&fed.ledger, mb * 1e6)?.total);
        }
        println!();
        totals.push(bytes as f64);
    }
    println!("two-stage payload is {:.3}% of full fine-tuning", 100.0 * totals[2] / totals[0]);
    Ok(())
}
