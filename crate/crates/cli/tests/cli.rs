use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn fedsparse(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsparse")).args(args).current_dir(dir).env("RUST_LOG", "warn").output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let text = format!(
        r#"[model]
depth = 2
width = 16
heads = 2
feature_dim = 8
image_size = 8
patch_size = 4
vocab_size = 16
max_tokens = 4

[federation]
num_clients = 4
rounds_stage1 = 2
rounds_stage2 = 2
learning_rate = 1e-2
{extra}
[data]
num_classes = 4
per_class = 20
alpha = 0.5
min_client_samples = 4

[output]
dir = "out"
checkpoint_every = 1
"#
    );
    fs::write(dir.join("tiny.toml"), text).unwrap();
    "tiny.toml".into()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn run_writes_artifacts_and_summarize_reads_them() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = stdout(&fedsparse(&["run", &cfg], tmp.path()));
    assert!(out.contains("final accuracy"), "{out}");
    for file in ["metrics.csv", "summary.toml", "checkpoint.fsna"] {
        assert!(tmp.path().join("out").join(file).exists(), "{file}");
    }
    let metrics = fs::read_to_string(tmp.path().join("out/metrics.csv")).unwrap();
    assert!(metrics.starts_with("stage,round,client_id,train_loss,val_accuracy,active_lora_layers,uploaded_bytes,lambda_mean"));

    let table = stdout(&fedsparse(&["summarize", "out/metrics.csv"], tmp.path()));
    assert_eq!(table.lines().count(), 3, "{table}");

    let again = stdout(&fedsparse(&["run", &cfg, "--resume"], tmp.path()));
    assert!(again.contains("final accuracy"));
    assert_eq!(fs::read_to_string(tmp.path().join("out/metrics.csv")).unwrap(), metrics);
}

#[test]
fn partition_report_flags_attackers() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "attack_ratio = 0.5\n");
    let report = stdout(&fedsparse(&["partition-report", &cfg], tmp.path()));
    assert_eq!(report.lines().filter(|l| l.ends_with(" *")).count(), 2, "{report}");
}

#[test]
fn export_data_writes_dataset_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    stdout(&fedsparse(&["export-data", &cfg, "data"], tmp.path()));
    assert!(tmp.path().join("data/dataset.fsna").exists());
    assert!(fs::read_to_string(tmp.path().join("data/manifest.txt")).unwrap().contains("samples = 80"));
}

#[test]
fn environment_overrides_apply() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    let o = Command::new(env!("CARGO_BIN_EXE_fedsparse"))
        .args(["partition-report", &cfg])
        .current_dir(tmp.path())
        .env("FEDSPARSE_FEDERATION_NUM_CLIENTS", "3")
        .output()
        .unwrap();
    let report = stdout(&o);
    assert!(report.contains("clients=3"), "{report}");
}

#[test]
fn invalid_config_fails_with_the_field_name() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("bad.toml"), "[lora]\nrank = 0\n").unwrap();
    let o = fedsparse(&["run", "bad.toml"], tmp.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("lora.rank"));
}

#[test]
fn missing_metrics_file_is_an_error() {
    let tmp = TempDir::new().unwrap();
    let o = fedsparse(&["summarize", "nope.csv"], tmp.path());
    assert!(!o.status.success());
}
