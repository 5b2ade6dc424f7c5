//! Interrupts a run, saves a checkpoint, restores it and checks that the
//! resumed run ends exactly where an uninterrupted one does.

use fedsparse::checkpoint::Checkpoint;
use fedsparse::config::ExperimentConfig;
use fedsparse::federation::Federation;
use fedsparse::nn::ModuleExt;

fn main() -> fedsparse::Result<()> {
    let mut cfg = ExperimentConfig::from_toml(include_str!("../../../configs/desk.toml"))?;
    cfg.federation.rounds_stage1 = 3;
    cfg.federation.rounds_stage2 = 3;

    let mut full = Federation::new(cfg.clone())?;
    full.run()?;

    let mut part = Federation::new(cfg)?;
    for _ in 0..6 {
        part.step()?;
    }
    let path = std::env::temp_dir().join("fedsparse-example-checkpoint.fsna");
    Checkpoint::capture(&part)?.save(&path)?;
    println!("saved {:?} round {} to {} ({} bytes)", part.phase, part.next_round, path.display(), std::fs::metadata(&path)?.len());
    drop(part);

    let mut resumed = Checkpoint::load(&path)?.restore()?;
    resumed.run()?;
    println!("metrics identical: {}", resumed.metrics == full.metrics);
    println!("final weights identical: {}", resumed.shared.fingerprint() == full.shared.fingerprint());
    std::fs::remove_file(&path)?;
    Ok(())
}
