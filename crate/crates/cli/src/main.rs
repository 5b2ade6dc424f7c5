use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedsparse::config::ExperimentConfig;
use fedsparse::federation::metrics;
use fedsparse::runner;

#[derive(Parser)]
#[command(name = "fedsparse", version, about = "Federated sparse LoRA and mixture-of-experts experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment; artifacts go to `output.dir`.
    Run {
        config: PathBuf,
        /// Continue from the checkpoint in the output directory, if any.
        #[arg(long)]
        resume: bool,
    },
    /// Print per-client class histograms for the configured partition.
    PartitionReport { config: PathBuf },
    /// Print a per-stage table from a metrics CSV.
    Summarize { metrics: PathBuf },
    /// Write the generated dataset and a manifest to a directory.
    ExportData { config: PathBuf, out: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command) -> fedsparse::Result<()> {
    match command {
        Command::Run { config, resume } => {
            let out = runner::run(ExperimentConfig::load(&config)?, resume)?;
            let s = &out.summary;
            println!("method {} seed {}", s.method, s.seed);
            if let Some(acc) = s.stage1_accuracy {
                println!("stage-1 accuracy {acc:.4}");
            }
            if let Some(acc) = s.final_accuracy {
                println!("final accuracy {acc:.4}");
            }
            println!("trainable {}/{} ({:.4}%)", s.trainable_params, s.total_params, 100.0 * s.trainable_proportion);
            println!("payload {} bytes", s.total_bytes);
            for row in &s.comm_time {
                println!("  {:>8} MB/s: {:.3} s", row.bandwidth_mb_per_s, row.seconds);
            }
            if !s.malicious_clients.is_empty() {
                println!("malicious clients {:?}", s.malicious_clients);
            }
            println!("artifacts in {}", out.dir.display());
        }
        Command::PartitionReport { config } => print!("{}", runner::partition_report(&ExperimentConfig::load(&config)?)?),
        Command::Summarize { metrics: path } => {
            let rows = metrics::from_csv(&std::fs::read_to_string(&path)?)?;
            print!("{}", runner::summarize(&rows));
        }
        Command::ExportData { config, out } => {
            runner::export_dataset(&ExperimentConfig::load(&config)?, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
