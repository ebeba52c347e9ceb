//! Strict JSON run configuration.
//!
//! Every section and key is optional and falls back to the defaults of
//! [`ModelSpec`] and [`TrainConfig`]; unknown keys are rejected. Relative paths
//! are taken relative to the working directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelSpec, NetworkMode};
use crate::optim::{DecayMode, DecayScope};
use crate::quant::Measure;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("config key {key}: {reason}")]
    Invalid { key: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub widths: Vec<usize>,
    pub mode: NetworkMode,
    pub bias: bool,
    pub bias_after_dequant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSection {
    /// Activation bit width.
    pub k: u32,
    pub epsilon: f64,
    /// Must agree with `model.mode` when given.
    pub measure: Option<Measure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub decay: DecayMode,
    pub decay_scope: DecayScope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub metrics_csv: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub model: ModelSection,
    pub quant: QuantSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub output: OutputSection,
}

impl Default for ModelSection {
    fn default() -> Self {
        let s = ModelSpec::default();
        Self {
            widths: s.widths,
            mode: s.mode,
            bias: s.bias,
            bias_after_dequant: s.bias_after_dequant,
        }
    }
}

impl Default for QuantSection {
    fn default() -> Self {
        let s = ModelSpec::default();
        Self {
            k: s.bits,
            epsilon: s.epsilon,
            measure: None,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            decay: t.decay_mode,
            decay_scope: t.decay_scope,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let dir = Path::new("data/mnist");
        Self {
            train_images: dir.join("train-images-idx3-ubyte.gz"),
            train_labels: dir.join("train-labels-idx1-ubyte.gz"),
            test_images: dir.join("t10k-images-idx3-ubyte.gz"),
            test_labels: dir.join("t10k-labels-idx1-ubyte.gz"),
        }
    }
}

impl RunConfigFile {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|source| ConfigError::Parse {
            path: origin.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Some(m) = self.quant.measure {
            if self.model.mode.is_ternary() && m != self.model.mode.measure() {
                return Err(ConfigError::Invalid {
                    key: "quant.measure",
                    reason: format!("{m:?} contradicts model.mode {}", self.model.mode),
                });
            }
        }
        self.model_spec().validate().map_err(|e| ConfigError::Invalid {
            key: "model",
            reason: e.to_string(),
        })?;
        self.train_config().validate().map_err(|e| ConfigError::Invalid {
            key: "train",
            reason: e.to_string(),
        })
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            widths: self.model.widths.clone(),
            mode: self.model.mode,
            bias: self.model.bias,
            bias_after_dequant: self.model.bias_after_dequant,
            bits: self.quant.k,
            epsilon: self.quant.epsilon,
            ..ModelSpec::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            decay_mode: self.train.decay,
            decay_scope: self.train.decay_scope,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.train.seed,
            ..TrainConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RunConfigFile, ConfigError> {
        RunConfigFile::from_json(s, Path::new("test.json"))
    }

    #[test]
    fn empty_document_gives_defaults() {
        let c = parse("{}").unwrap();
        assert_eq!(c, RunConfigFile::default());
        assert_eq!(c.model_spec(), ModelSpec::default());
        assert_eq!(c.train_config(), TrainConfig::default());
    }

    #[test]
    fn full_document() {
        let c = parse(
            r#"{
              "model": {"widths": [784, 32, 10], "mode": "median", "bias": false, "bias_after_dequant": true},
              "quant": {"k": 4, "epsilon": 1e-6, "measure": "median"},
              "train": {"lr": 0.01, "weight_decay": 0.05, "epochs": 3, "batch_size": 64, "seed": 9, "decay": "coupled", "decay_scope": "all"},
              "data": {"train_images": "a", "train_labels": "b", "test_images": "c", "test_labels": "d"},
              "output": {"metrics_csv": "m.csv", "checkpoint": "m.bl58"}
            }"#,
        )
        .unwrap();
        let spec = c.model_spec();
        assert_eq!(spec.widths, vec![784, 32, 10]);
        assert_eq!(spec.mode, NetworkMode::TernaryMedian);
        assert_eq!(spec.bits, 4);
        assert!(!spec.bias && spec.bias_after_dequant);
        let t = c.train_config();
        assert_eq!((t.lr, t.weight_decay, t.epochs, t.batch_size, t.seed), (0.01, 0.05, 3, 64, 9));
        assert_eq!(t.decay_mode, DecayMode::Coupled);
        assert_eq!(t.decay_scope, DecayScope::All);
        assert_eq!(c.output.checkpoint, Some(PathBuf::from("m.bl58")));
        assert_eq!(parse(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse(r#"{"train": {"learning_rate": 0.1}}"#).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = parse(r#"{"extra": 1}"#).unwrap_err();
        assert!(err.to_string().contains("extra"), "{err}");
    }

    #[test]
    fn semantic_errors_name_the_key() {
        let err = parse(r#"{"train": {"epochs": 0}}"#).unwrap_err();
        assert!(err.to_string().starts_with("config key train"), "{err}");
        let err = parse(r#"{"model": {"mode": "mean"}, "quant": {"measure": "median"}}"#).unwrap_err();
        assert!(err.to_string().contains("quant.measure"), "{err}");
        assert!(parse(r#"{"model": {"mode": "8"}}"#).is_err());
    }
}
