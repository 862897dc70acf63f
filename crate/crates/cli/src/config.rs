//! Run configuration: TOML file, then command-line overrides.

use std::path::{Path, PathBuf};

use malaria_core::data::AugmentConfig;
use malaria_core::train::TrainConfig;
use malaria_core::Architecture;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub root: Option<PathBuf>,
    pub seed: u64,
}

/// Training hyperparameters. The seed lives in `[data]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub es_patience: usize,
    pub es_min_delta: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            lr: d.lr,
            epochs: d.epochs,
            batch_size: d.batch_size,
            es_patience: d.es_patience,
            es_min_delta: d.es_min_delta,
            plateau_factor: d.plateau_factor,
            plateau_patience: d.plateau_patience,
            min_lr: d.min_lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Divide every channel width by this; 1 is the reference network.
    pub width_divisor: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { width_divisor: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSection {
    pub bind: String,
    pub checkpoint: Option<PathBuf>,
    /// Allowed browser origins; empty allows any.
    pub cors_origins: Vec<String>,
}

impl Default for ServeSection {
    fn default() -> Self {
        ServeSection {
            bind: "127.0.0.1:8080".into(),
            checkpoint: None,
            cors_origins: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub augment: AugmentConfig,
    pub serve: ServeSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {}", path.display(), e.message())))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            es_patience: t.es_patience,
            es_min_delta: t.es_min_delta,
            plateau_factor: t.plateau_factor,
            plateau_patience: t.plateau_patience,
            min_lr: t.min_lr,
            seed: self.data.seed,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::narrow(self.model.width_divisor)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
