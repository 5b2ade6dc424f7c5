//! End-to-end runs with on-disk artifacts: metrics, checkpoints and a summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::container::Container;
use crate::data;
use crate::error::{Error, Result};
use crate::federation::ledger::BYTES_PER_MB;
use crate::federation::metrics::MetricsSink;
use crate::federation::{comm_time, initial_model, partition, ActivationRecord, Direction, Federation, MetricRow};
use crate::nn::NamedArray;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.fsna";
pub const SUMMARY_FILE: &str = "summary.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub id: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub malicious: bool,
    pub final_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommTimeRow {
    pub bandwidth_mb_per_s: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub complete: bool,
    pub method: String,
    pub seed: u64,
    pub final_accuracy: Option<f64>,
    pub stage1_accuracy: Option<f64>,
    pub trainable_params: u64,
    pub total_params: u64,
    pub trainable_proportion: f64,
    pub upload_bytes: u64,
    pub broadcast_bytes: u64,
    pub total_bytes: u64,
    pub malicious_clients: Vec<usize>,
    pub comm_time: Vec<CommTimeRow>,
    pub clients: Vec<ClientSummary>,
    pub activations: Vec<ActivationRecord>,
}

impl Summary {
    pub fn of(fed: &Federation) -> Result<Self> {
        let proportion = initial_model(&fed.config)?.trainable_proportion();
        let mut comm = Vec::new();
        for &mb in &fed.config.output.bandwidths_mb {
            comm.push(CommTimeRow { bandwidth_mb_per_s: mb, seconds: comm_time(&fed.ledger, mb * BYTES_PER_MB)?.total });
        }
        let clients = fed
            .clients
            .iter()
            .map(|c| ClientSummary {
                id: c.id,
                train_samples: c.train.len(),
                val_samples: c.val.len(),
                malicious: c.malicious,
                final_accuracy: fed.metrics.iter().rev().find(|r| r.client_id == c.id.to_string()).map(|r| r.val_accuracy),
            })
            .collect();
        Ok(Summary {
            complete: fed.is_done(),
            method: fed.config.federation.method.name().to_string(),
            seed: fed.config.data.seed,
            final_accuracy: fed.latest_accuracy(),
            stage1_accuracy: fed.stage1_accuracy,
            trainable_params: proportion.trainable,
            total_params: proportion.total,
            trainable_proportion: proportion.value(),
            upload_bytes: fed.ledger.bytes_where(|t| t.direction == Direction::Upload),
            broadcast_bytes: fed.ledger.bytes_where(|t| t.direction == Direction::Broadcast),
            total_bytes: fed.ledger.total_bytes(),
            malicious_clients: fed.malicious_clients(),
            comm_time: comm,
            clients,
            activations: fed.activations.clone(),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Input(format!("cannot encode summary: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Input(format!("bad summary: {e}")))
    }
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub struct RunOutput {
    pub dir: PathBuf,
    pub summary: Summary,
    pub federation: Federation,
}

/// Runs `config` to completion under `config.output.dir`, resuming from the
/// checkpoint there when `resume` is set and one exists.
pub fn run(config: ExperimentConfig, resume: bool) -> Result<RunOutput> {
    config.validate()?;
    let dir = PathBuf::from(&config.output.dir);
    fs::create_dir_all(&dir)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let mut fed = if resume && ckpt_path.exists() {
        let fed = Checkpoint::load(&ckpt_path)?.restore_with(config)?;
        log::info!("resumed {} at {:?} round {}", ckpt_path.display(), fed.phase, fed.next_round);
        fed
    } else {
        Federation::new(config)?
    };
    let mut sink = MetricsSink::create(&dir.join(METRICS_FILE), &fed.metrics)?;
    write_atomic(&dir.join(SUMMARY_FILE), &Summary::of(&fed)?.to_toml()?)?;
    let every = fed.config.output.checkpoint_every;
    while !fed.is_done() {
        let rows = fed.step()?;
        sink.append(&rows)?;
        if let Some(server) = rows.iter().find(|r| r.is_server()) {
            log::info!("stage {} round {}: accuracy {:.4}", server.stage, server.round, server.val_accuracy);
        }
        let round = fed.next_round.saturating_sub(1);
        if fed.is_done() || (every > 0 && round > 0 && round % every == 0) {
            Checkpoint::capture(&fed)?.save(&ckpt_path)?;
        }
    }
    let summary = Summary::of(&fed)?;
    write_atomic(&dir.join(SUMMARY_FILE), &summary.to_toml()?)?;
    Ok(RunOutput { dir, summary, federation: fed })
}

/// Per-client class histograms of the configured partition.
pub fn partition_report(config: &ExperimentConfig) -> Result<String> {
    config.validate()?;
    let dataset = data::generate(&config.synthetic_spec(), config.data.seed)?;
    let parts = partition(config, &dataset)?;
    let malicious = crate::federation::attack::choose_malicious(config.data.seed, config.federation.num_clients, config.federation.attack_ratio);
    let mut out = String::new();
    writeln!(out, "alpha={} seed={} clients={} classes={}", config.data.alpha, config.data.seed, parts.len(), dataset.num_classes()).unwrap();
    let labels: Vec<String> = (0..dataset.num_classes()).map(|k| format!("{k:>4}")).collect();
    writeln!(out, "client     n top% |{}", labels.join("")).unwrap();
    for (i, idx) in parts.iter().enumerate() {
        let counts = dataset.class_counts(idx);
        let top = counts.iter().copied().max().unwrap_or(0) as f64 / idx.len().max(1) as f64;
        let hist: String = counts.iter().map(|c| format!("{c:>4}")).collect();
        let flag = if malicious[i] { " *" } else { "" };
        writeln!(out, "{i:>6} {:>5} {:>4.0} |{hist}{flag}", idx.len(), 100.0 * top).unwrap();
    }
    if malicious.iter().any(|&m| m) {
        writeln!(out, "* malicious").unwrap();
    }
    Ok(out)
}

/// Per-stage aggregate table over a metrics file's rows.
pub fn summarize(rows: &[MetricRow]) -> String {
    let mut stages: Vec<&str> = Vec::new();
    for r in rows {
        if !stages.contains(&r.stage.as_str()) {
            stages.push(&r.stage);
        }
    }
    let mut out = String::new();
    writeln!(out, "{:<6} {:>6} {:>10} {:>10} {:>10} {:>8} {:>14}", "stage", "rounds", "final_acc", "best_acc", "last_loss", "lambda", "uploaded_bytes").unwrap();
    for stage in stages {
        let server: Vec<&MetricRow> = rows.iter().filter(|r| r.stage == stage && r.is_server()).collect();
        let uploaded: u64 = rows.iter().filter(|r| r.stage == stage && !r.is_server()).map(|r| r.uploaded_bytes).sum();
        let last = server.last();
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        writeln!(
            out,
            "{:<6} {:>6} {:>10} {:>10} {:>10} {:>8} {:>14}",
            stage,
            server.iter().map(|r| r.round).max().unwrap_or(0),
            fmt(last.map(|r| r.val_accuracy)),
            fmt(server.iter().map(|r| r.val_accuracy).reduce(f64::max)),
            fmt(last.and_then(|r| r.train_loss)),
            fmt(last.and_then(|r| r.lambda_mean)),
            uploaded,
        )
        .unwrap();
    }
    out
}

/// Writes the generated dataset as `dataset.fsna` plus a text manifest.
pub fn export_dataset(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    config.validate()?;
    let ds = data::generate(&config.synthetic_spec(), config.data.seed)?;
    let parts = partition(config, &ds)?;
    let spec = &ds.spec;
    let prompts: Vec<f32> = ds.class_prompts.iter().flatten().map(|&t| t as f32).collect();
    let mut arrays = vec![
        NamedArray { name: "images".into(), shape: vec![ds.len(), spec.channels, spec.image_size, spec.image_size], data: ds.images.clone() },
        NamedArray { name: "labels".into(), shape: vec![ds.len()], data: ds.labels.iter().map(|&l| l as f32).collect() },
        NamedArray { name: "prompts".into(), shape: vec![ds.num_classes(), spec.prompt_len], data: prompts },
    ];
    for (i, idx) in parts.iter().enumerate() {
        arrays.push(NamedArray { name: format!("client.{i}"), shape: vec![idx.len()], data: idx.iter().map(|&j| j as f32).collect() });
    }
    let mut manifest = String::new();
    writeln!(manifest, "samples = {}", ds.len()).unwrap();
    writeln!(manifest, "classes = {}", ds.num_classes()).unwrap();
    writeln!(manifest, "seed = {}", config.data.seed).unwrap();
    writeln!(manifest, "alpha = {}", config.data.alpha).unwrap();
    writeln!(manifest, "clients = {}", parts.len()).unwrap();
    writeln!(manifest, "class_counts = {:?}", ds.class_counts(&(0..ds.len()).collect::<Vec<_>>())).unwrap();
    writeln!(manifest, "client_counts = {:?}", parts.iter().map(Vec::len).collect::<Vec<_>>()).unwrap();
    fs::create_dir_all(dir)?;
    Container { meta: manifest.clone(), arrays }.save(&dir.join("dataset.fsna"))?;
    write_atomic(&dir.join("manifest.txt"), &manifest)?;
    Ok(())
}
