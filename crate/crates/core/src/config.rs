//! The run configuration: one TOML file holding every setting of a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticTaskSpec;
use crate::decode::BeamConfig;
use crate::model::ModelConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total epochs, warm start included.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub warm_start_max_epochs: usize,
    /// Warm start ends after this many epochs without a dev `ce0` improvement
    /// larger than `warm_start_min_delta`.
    pub warm_start_patience: usize,
    pub warm_start_min_delta: f64,
    /// When the warm start ends, copy the trained `e1`/`d1` weights into
    /// `e2`/`d2`.
    pub seed_refinement_from_warm_start: bool,
    /// Write `epoch-NNN.ckpt` after every epoch (the latest and best
    /// checkpoints are always written).
    pub keep_epoch_checkpoints: bool,
    pub lr_schedule: LrSchedule,
}

/// Per-epoch learning-rate schedule over `epochs`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` at epoch 0 towards 0 at `epochs`.
    Cosine,
}

impl TrainConfig {
    /// Learning rate for the 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = epoch.min(self.epochs) as f64 / self.epochs.max(1) as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            warm_start_max_epochs: 10,
            warm_start_patience: 3,
            warm_start_min_delta: 1e-3,
            seed_refinement_from_warm_start: true,
            keep_epoch_checkpoints: true,
            lr_schedule: LrSchedule::Cosine,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Weight of the distillation term.
    pub lambda: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: BeamConfig,
    pub data: SyntheticTaskSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lambda: 15.0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            beam: BeamConfig::default(),
            data: SyntheticTaskSpec::default(),
        }
    }
}

/// Keys that may change when resuming a run.
const RESUMABLE: [&str; 2] = ["train.epochs", "train.keep_epoch_checkpoints"];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(ConfigError::Invalid)?;
        self.data.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.model.vocab_size != self.data.vocab_size() {
            return Err(ConfigError::Invalid(format!(
                "model.vocab_size is {} but the task has {} symbols plus 3 reserved ids",
                self.model.vocab_size, self.data.n_symbols
            )));
        }
        if self.model.frame_dim != self.data.frame_dim {
            return Err(ConfigError::Invalid(format!(
                "model.frame_dim {} differs from data.frame_dim {}",
                self.model.frame_dim, self.data.frame_dim
            )));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.epochs == 0 {
            return Err(ConfigError::Invalid("train.epochs and train.batch_size must be positive".into()));
        }
        if !(t.lr >= 0.0 && t.clip_norm > 0.0) {
            return Err(ConfigError::Invalid("train.lr must be >= 0 and train.clip_norm > 0".into()));
        }
        if self.beam.width == 0 {
            return Err(ConfigError::Invalid("beam.width must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ConfigError::Invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// The first dotted key (in sorted order) whose value differs between
    /// `self` and `other`, ignoring keys that may change on resume.
    pub fn first_resume_mismatch(&self, other: &Self) -> Option<String> {
        let a = flatten(&toml::Value::try_from(self).expect("config serialises"));
        let b = flatten(&toml::Value::try_from(other).expect("config serialises"));
        let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .filter(|k| !RESUMABLE.contains(&k.as_str()))
            .find(|k| a.get(*k) != b.get(*k))
            .cloned()
    }
}

fn flatten(v: &toml::Value) -> std::collections::BTreeMap<String, toml::Value> {
    fn walk(prefix: &str, v: &toml::Value, out: &mut std::collections::BTreeMap<String, toml::Value>) {
        match v {
            toml::Value::Table(t) => {
                for (k, v) in t {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, v, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.clone());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk("", v, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn cosine_schedule_starts_at_lr_and_halves_midway() {
        let mut t = TrainConfig {
            epochs: 10,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        assert_eq!(t.lr_at(0), 1e-3);
        assert!((t.lr_at(5) - 5e-4).abs() < 1e-15);
        assert!(t.lr_at(9) < t.lr_at(8));
        t.lr_schedule = LrSchedule::Constant;
        assert_eq!(t.lr_at(9), 1e-3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("seed = 1\nbogus = 2\n").is_err());
        assert!(RunConfig::from_toml("[model]\nwidht = 8\n").is_err());
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let c = RunConfig::from_toml("lambda = 0.0\n[model]\niterations = 1\n").unwrap();
        assert_eq!(c.lambda, 0.0);
        assert_eq!(c.model.iterations, 1);
        assert_eq!(c.model.width, ModelConfig::default().width);
    }

    #[test]
    fn resume_mismatch_names_the_first_differing_key() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.epochs = 99;
        assert_eq!(a.first_resume_mismatch(&b), None);
        b.model.iterations = 1;
        b.seed = 5;
        assert_eq!(a.first_resume_mismatch(&b).as_deref(), Some("model.iterations"));
    }
}
