//! Key=value run configuration files.
//!
//! Every training hyperparameter can be set; missing keys take the
//! documented defaults and unknown keys are rejected so typos cannot
//! silently fall back.

use std::path::{Path, PathBuf};

use hsimamba_core::train::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value for {key}: {value:?}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("missing required key {0:?}")]
    MissingKey(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parsed run configuration: training hyperparameters plus paths.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out_dir: PathBuf::from("."),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line,
                    text: trimmed.to_string(),
                });
            };
            let key = key.trim();
            let value = value.trim();
            let bad = |k: &str, v: &str| ConfigError::BadValue {
                line,
                key: k.to_string(),
                value: v.to_string(),
            };
            match key {
                "dataset" => cfg.dataset = Some(PathBuf::from(value)),
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                "lr" => cfg.train.lr = value.parse().map_err(|_| bad(key, value))?,
                "epochs" => cfg.train.epochs = value.parse().map_err(|_| bad(key, value))?,
                "hidden" => cfg.train.hidden = value.parse().map_err(|_| bad(key, value))?,
                "state_dim" => cfg.train.state_dim = value.parse().map_err(|_| bad(key, value))?,
                "expansion" => cfg.train.expansion = value.parse().map_err(|_| bad(key, value))?,
                "attn_dim" => cfg.train.attn_dim = value.parse().map_err(|_| bad(key, value))?,
                "spectral_group" => {
                    cfg.train.spectral_group = value.parse().map_err(|_| bad(key, value))?
                }
                "clusters_per_class" => {
                    cfg.train.clusters_per_class = value.parse().map_err(|_| bad(key, value))?
                }
                "gamma" => cfg.train.gamma = value.parse().map_err(|_| bad(key, value))?,
                "tau" => cfg.train.tau = value.parse().map_err(|_| bad(key, value))?,
                "rho" => cfg.train.rho = value.parse().map_err(|_| bad(key, value))?,
                "lambda" => cfg.train.lambda = value.parse().map_err(|_| bad(key, value))?,
                "weight_decay" => {
                    cfg.train.weight_decay = value.parse().map_err(|_| bad(key, value))?
                }
                "seed" => cfg.train.seed = value.parse().map_err(|_| bad(key, value))?,
                "use_cluster_loss" => {
                    cfg.train.use_cluster_loss = parse_bool(value).ok_or_else(|| bad(key, value))?
                }
                "use_attention" => {
                    cfg.train.use_attention = parse_bool(value).ok_or_else(|| bad(key, value))?
                }
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn dataset_path(&self) -> Result<&Path, ConfigError> {
        self.dataset
            .as_deref()
            .ok_or(ConfigError::MissingKey("dataset"))
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}
