use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the decoder of one modality attends over besides its mask tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputPolicy {
    /// Visible tokens of the modality at their positions, plus fusion tokens.
    FusionPlusUnimodal,
    /// Fusion tokens only.
    FusionOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub input_policy: InputPolicy,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
            input_policy: InputPolicy::FusionPlusUnimodal,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("decoder.depth", "must be at least 1"));
        }
        if self.dim == 0 || !self.dim.is_multiple_of(4) {
            return Err(Error::config("decoder.dim", "must be a positive multiple of 4"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config("decoder.heads", format!("must divide decoder.dim {}", self.dim)));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::config("decoder.mlp_ratio", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Scaled by `batch_size / 256` to give the peak learning rate.
    pub base_lr: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub mask_ratio_v: f64,
    pub mask_ratio_a: f64,
    /// Normalize each target patch to zero mean and unit variance.
    pub norm_pix: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.04,
            batch_size: 16,
            warmup_epochs: 2,
            total_epochs: 20,
            steps_per_epoch: 10,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            mask_ratio_v: 0.75,
            mask_ratio_a: 0.75,
            norm_pix: false,
        }
    }
}

impl TrainConfig {
    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(Error::config("train.base_lr", "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::config("train.steps_per_epoch", "must be at least 1"));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::config("train.warmup_epochs", "must not exceed train.total_epochs"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        for (key, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        for (key, r) in [("train.mask_ratio_v", self.mask_ratio_v), ("train.mask_ratio_a", self.mask_ratio_a)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}
