//! Experiment configuration: a sectioned TOML file where every key has a
//! default, plus `FEDSPARSE_<SECTION>_<KEY>` environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::encoder::{EncoderConfig, Site};
use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "FEDSPARSE_";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: EncoderConfig,
    pub lora: LoraConfig,
    pub sal: SalConfig,
    pub federation: FederationConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub dropout: f32,
    pub weight_decay: f32,
    pub sites: Vec<Site>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 1, dropout: 0.1, weight_decay: 0.05, sites: vec![Site::Q, Site::V] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SalConfig {
    pub queue_len: usize,
    pub threshold: f64,
}

impl Default for SalConfig {
    fn default() -> Self {
        SalConfig { queue_len: 5, threshold: 0.005 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Two-stage adapter training with a gated mixture in stage two.
    Fedms,
    /// Full fine-tuning of every parameter.
    Ft,
    /// Fine-tuning of the upper half of each tower's blocks.
    Lfft,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fedms => "fedms",
            Method::Ft => "ft",
            Method::Lfft => "lfft",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub method: Method,
    pub num_clients: usize,
    pub rounds_stage1: usize,
    pub rounds_stage2: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub attack_ratio: f64,
    /// Weight stage-one uploads by client sample count instead of uniformly.
    pub sample_weighted: bool,
    pub val_fraction: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            method: Method::Fedms,
            num_clients: 10,
            rounds_stage1: 25,
            rounds_stage2: 25,
            local_epochs: 1,
            batch_size: 32,
            learning_rate: 2e-4,
            attack_ratio: 0.0,
            sample_weighted: false,
            val_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub alpha: f64,
    pub seed: u64,
    pub min_client_samples: usize,
    pub signal: f32,
    pub noise: f32,
    pub pattern_grid: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_classes: 10,
            per_class: 100,
            alpha: 1.0,
            seed: 0,
            min_client_samples: 10,
            signal: 1.0,
            noise: 1.0,
            pattern_grid: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Rounds between checkpoints; 0 disables checkpointing.
    pub checkpoint_every: usize,
    /// Bandwidth scenarios for the communication-time table, in MB/s.
    pub bandwidths_mb: Vec<f64>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("runs/default"), checkpoint_every: 5, bandwidths_mb: vec![0.1, 1.0, 10.0] }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config("<file>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, applies environment overrides, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_with_env(&text, std::env::vars())
    }

    pub fn from_toml_with_env(text: &str, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
        for (key, value) in vars {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else { continue };
            let rest = rest.to_ascii_lowercase();
            let Some((section, field)) = rest.split_once('_') else {
                return Err(Error::config(key.clone(), "expected FEDSPARSE_<SECTION>_<KEY>"));
            };
            if !["model", "lora", "sal", "federation", "data", "output"].contains(&section) {
                return Err(Error::config(key.clone(), format!("unknown section `{section}`")));
            }
            let entry = table.entry(section.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
            let toml::Value::Table(sec) = entry else {
                return Err(Error::config(section, "is not a table"));
            };
            sec.insert(field.to_string(), parse_scalar(&value));
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.data.num_classes,
            per_class: self.data.per_class,
            image_size: self.model.image_size,
            channels: self.model.channels,
            pattern_grid: self.data.pattern_grid,
            signal: self.data.signal,
            noise: self.data.noise,
            prompt_len: self.model.max_tokens,
            vocab_size: self.model.vocab_size,
        }
    }

    /// floor(attack_ratio · N).
    pub fn malicious_count(&self) -> usize {
        (self.federation.attack_ratio * self.federation.num_clients as f64 + 1e-9).floor() as usize
    }

    /// Checks every field, naming the first offender.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let (l, s, f, d, o) = (&self.lora, &self.sal, &self.federation, &self.data, &self.output);
        let width = self.model.width;
        if l.rank == 0 || l.rank > width {
            return Err(Error::config("lora.rank", format!("must lie in 1..={width}")));
        }
        if !(0.0..1.0).contains(&l.dropout) {
            return Err(Error::config("lora.dropout", "must lie in [0, 1)"));
        }
        if !(l.weight_decay >= 0.0 && l.weight_decay.is_finite()) {
            return Err(Error::config("lora.weight_decay", "must be finite and non-negative"));
        }
        if l.sites.is_empty() {
            return Err(Error::config("lora.sites", "needs at least one of q, k, v, o"));
        }
        if s.queue_len == 0 {
            return Err(Error::config("sal.queue_len", "must be at least 1"));
        }
        if s.threshold.is_nan() {
            return Err(Error::config("sal.threshold", "must be a number"));
        }
        if f.num_clients == 0 {
            return Err(Error::config("federation.num_clients", "must be at least 1"));
        }
        if f.local_epochs == 0 {
            return Err(Error::config("federation.local_epochs", "must be at least 1"));
        }
        if f.batch_size < 2 {
            return Err(Error::config("federation.batch_size", "must be at least 2 (the gate uses batch norm)"));
        }
        if !(f.learning_rate > 0.0 && f.learning_rate.is_finite()) {
            return Err(Error::config("federation.learning_rate", "must be positive"));
        }
        if !(0.0..=1.0).contains(&f.attack_ratio) {
            return Err(Error::config("federation.attack_ratio", "must lie in [0, 1]"));
        }
        if !(f.val_fraction > 0.0 && f.val_fraction < 1.0) {
            return Err(Error::config("federation.val_fraction", "must lie in (0, 1)"));
        }
        if !(d.alpha > 0.0 && d.alpha.is_finite()) {
            return Err(Error::config("data.alpha", "must be positive"));
        }
        if d.seed > i64::MAX as u64 {
            return Err(Error::config("data.seed", "must fit in a signed 64-bit integer"));
        }
        if d.min_client_samples < 2 {
            return Err(Error::config("data.min_client_samples", "must be at least 2 (one train and one validation sample)"));
        }
        if d.min_client_samples * f.num_clients > d.num_classes * d.per_class {
            return Err(Error::config("data.min_client_samples", "clients cannot all reach this size"));
        }
        self.synthetic_spec().validate()?;
        if o.bandwidths_mb.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::config("output.bandwidths_mb", "bandwidths must be positive"));
        }
        Ok(())
    }
}

/// Interprets an override as a TOML value, falling back to a bare string.
fn parse_scalar(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.federation.learning_rate, 2e-4);
        assert_eq!((cfg.federation.rounds_stage1, cfg.federation.rounds_stage2), (25, 25));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_field() {
        let err = ExperimentConfig::from_toml("[lora]\nrank = 0\n").unwrap_err();
        assert!(err.to_string().contains("lora.rank"), "{err}");
        let err = ExperimentConfig::from_toml("[data]\nalpha = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("data.alpha"), "{err}");
        assert!(ExperimentConfig::from_toml("[lora]\nrnk = 1\n").is_err());
    }

    #[test]
    fn env_overrides_apply() {
        let vars = [
            ("FEDSPARSE_FEDERATION_NUM_CLIENTS".to_string(), "4".to_string()),
            ("FEDSPARSE_FEDERATION_METHOD".to_string(), "lfft".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        let cfg = ExperimentConfig::from_toml_with_env("[federation]\nnum_clients = 7\n", vars).unwrap();
        assert_eq!(cfg.federation.num_clients, 4);
        assert_eq!(cfg.federation.method, Method::Lfft);
        let bad = [("FEDSPARSE_NOPE_X".to_string(), "1".to_string())];
        assert!(ExperimentConfig::from_toml_with_env("", bad).is_err());
    }

    #[test]
    fn malicious_count_floors() {
        let mut cfg = ExperimentConfig::default();
        cfg.federation.attack_ratio = 0.2;
        assert_eq!(cfg.malicious_count(), 2);
        cfg.federation.attack_ratio = 0.25;
        assert_eq!(cfg.malicious_count(), 2);
    }
}
