use serde::{Deserialize, Serialize};

use super::loss::LossConfig;
use super::optim::AdamWConfig;
use crate::error::{Error, Result};
use crate::masking::{MaskingRatios, MaskingStrategy, SamplingMode};

/// Schedule and optimizer settings shared by pre-training and fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub epochs: usize,
    /// Learning-rate warmup; in pre-training also the span of random masking.
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub ratios: MaskingRatios,
    /// Epochs between masking-weight refreshes.
    pub weight_update_interval: usize,
    /// Per-layer learning-rate multiplier; 1.0 disables it.
    pub layerwise_lr_decay: f64,
    pub global_pool: bool,
    pub seed: u64,
    pub sampling: SamplingMode,
    pub loss: LossConfig,
    /// Pre-training partition source.
    pub strategy: MaskingStrategy,
    /// Fine-tuning: mask and throw by cached weights. Off means every token is used.
    pub use_sam: bool,
    /// Fine-tuning: copy the pre-training head instead of a fresh one.
    pub reuse_head: bool,
    /// Random resized crop + flip; off means the evaluation transform.
    pub augment: bool,
}

impl TrainRunConfig {
    pub fn pretrain_default() -> Self {
        Self {
            epochs: 300,
            warmup_epochs: 40,
            base_lr: 1e-3,
            min_lr: 0.0,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            batch_size: 64,
            ratios: MaskingRatios::sam_default(),
            weight_update_interval: 40,
            layerwise_lr_decay: 1.0,
            global_pool: false,
            seed: 0,
            sampling: SamplingMode::Stochastic,
            loss: LossConfig::default(),
            strategy: MaskingStrategy::Sam,
            use_sam: true,
            reuse_head: false,
            augment: true,
        }
    }

    pub fn finetune_default() -> Self {
        Self {
            epochs: 100,
            warmup_epochs: 5,
            beta2: 0.999,
            batch_size: 256,
            weight_update_interval: 20,
            layerwise_lr_decay: 0.75,
            global_pool: true,
            ..Self::pretrain_default()
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(Error::Config {
                field: field.into(),
                reason,
            })
        };
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.warmup_epochs > self.epochs {
            return bad(
                "warmup_epochs",
                format!("{} exceeds epochs ({})", self.warmup_epochs, self.epochs),
            );
        }
        if self.weight_update_interval == 0 {
            return bad("weight_update_interval", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return bad("base_lr", format!("must be positive, got {}", self.base_lr));
        }
        if !(self.min_lr >= 0.0) || self.min_lr > self.base_lr {
            return bad("min_lr", format!("must be in [0, base_lr], got {}", self.min_lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("must be >= 0, got {}", self.weight_decay));
        }
        for (field, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(field, format!("must be in [0, 1), got {v}"));
            }
        }
        if !(self.layerwise_lr_decay > 0.0 && self.layerwise_lr_decay <= 1.0) {
            return bad(
                "layerwise_lr_decay",
                format!("must be in (0, 1], got {}", self.layerwise_lr_decay),
            );
        }
        self.ratios.validate()?;
        self.loss.validate()
    }
}
