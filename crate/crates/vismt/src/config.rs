//! Run configuration: a sectioned key-value file plus command-line
//! overrides. Unknown keys are rejected so typos fail loudly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelKind, Weighting};
use crate::train::{ModelSettings, RegMode, TrainConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d: usize,
    pub subspaces: usize,
    pub depth: usize,
    pub kind: ModelKind,
    pub weighting: Weighting,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d: 32,
            subspaces: 2,
            depth: 1,
            kind: ModelKind::Multimodal,
            weighting: Weighting::Adaptive,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lambda1: f64,
    pub lambda2: f64,
    pub mode: RegMode,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub aligner_iterations: usize,
    pub dev_fraction: f64,
    pub max_decode_len: usize,
    pub vocab_cap: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lambda1: t.lambda1,
            lambda2: t.lambda2,
            mode: t.mode,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            epochs: t.epochs,
            batch_size: t.batch_size,
            dropout: t.dropout,
            aligner_iterations: t.aligner_iterations,
            dev_fraction: t.dev_fraction,
            max_decode_len: t.max_decode_len,
            vocab_cap: t.vocab_cap,
        }
    }
}

/// Merged run configuration; the resolved form is echoed into run outputs
/// for provenance.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn settings(&self) -> ModelSettings {
        ModelSettings {
            d: self.model.d,
            subspaces: self.model.subspaces,
            depth: self.model.depth,
            kind: self.model.kind,
            weighting: self.model.weighting,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lambda1: self.train.lambda1,
            lambda2: self.train.lambda2,
            mode: self.train.mode,
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            epsilon: self.train.epsilon,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed,
            dropout: self.train.dropout,
            aligner_iterations: self.train.aligner_iterations,
            dev_fraction: self.train.dev_fraction,
            max_decode_len: self.train.max_decode_len,
            vocab_cap: self.train.vocab_cap,
        }
    }
}
