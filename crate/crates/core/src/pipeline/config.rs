use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, QuantScope};

/// Optimizer and schedule settings for both stages. The adapter rank
/// schedule and `lambda_ortho` live in `ModelConfig::adapter`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub lr_encoder_adapters: f64,
    pub lr_decoder: f64,
    pub lr_lambda_stage2: f64,
    /// Seed for adapter init and batch order.
    pub seed: u64,
    /// Seed of the train/val/test shuffle.
    pub split_seed: u64,
    pub quant_scope: QuantScope,
    /// Also train decoder weights through the straight-through estimator in
    /// Stage 2.
    pub stage2_train_decoder: bool,
    pub nsd_tau: f64,
    pub pretrain: PretrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_stage1: 15,
            epochs_stage2: 5,
            batch_size: 16,
            lr_encoder_adapters: 5e-5,
            lr_decoder: 2e-5,
            lr_lambda_stage2: 1e-6,
            seed: 7,
            split_seed: 7,
            quant_scope: QuantScope::Full,
            stage2_train_decoder: false,
            nsd_tau: crate::metrics::DEFAULT_NSD_TAU,
            pretrain: PretrainConfig::default(),
        }
    }
}

/// Base-model training on the generic source-domain generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; cosine decay to zero after a linear warmup.
    pub lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            samples: 1536,
            epochs: 8,
            batch_size: 16,
            lr: 2e-3,
            warmup_steps: 50,
            seed: 1234,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let lrs = [self.lr_encoder_adapters, self.lr_decoder, self.lr_lambda_stage2, self.pretrain.lr];
        if lrs.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::contract("learning rates must be positive"));
        }
        if self.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        if let Some(&last) = model.adapter.prune_epochs.last() {
            if self.epochs_stage1 > 0 && self.epochs_stage1 < last {
                return Err(Error::contract(format!(
                    "epochs_stage1 {} ends before the last prune epoch {last}",
                    self.epochs_stage1
                )));
            }
        }
        if !(self.nsd_tau >= 0.0) {
            return Err(Error::contract("nsd_tau must be nonnegative"));
        }
        Ok(())
    }
}

/// Full JSON configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model)
    }
}
