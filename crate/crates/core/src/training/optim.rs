//! AdamW, the warmup + cosine learning-rate schedule and layer-wise decay.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::model::Module;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

struct Moments {
    m: Array2<f64>,
    v: Array2<f64>,
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

/// Biases, norm parameters and learned tokens (all single-row tensors) are
/// excluded from weight decay.
pub fn decays(name: &str, rows: usize) -> bool {
    rows > 1 && !name.ends_with("cls_token") && !name.ends_with("mask_token")
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr · scale(name)` per parameter.
    pub fn step(&mut self, model: &mut dyn Module, lr: f64, scale: &dyn Fn(&str) -> f64) {
        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let state = &mut self.state;
        model.visit_mut("", &mut |name, p| {
            let st = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: Array2::zeros(p.value.dim()),
                v: Array2::zeros(p.value.dim()),
            });
            let step_lr = lr * scale(name);
            let wd = if decays(name, p.value.nrows()) { weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(&mut st.m)
                .and(&mut st.v)
                .for_each(|w, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *w *= 1.0 - step_lr * wd;
                    *w -= step_lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        });
    }
}

/// Linear warmup to `base_lr`, then half-cosine down to `min_lr`.
/// `epoch` is fractional so the rate can change every step.
pub fn cosine_lr(epoch: f64, warmup_epochs: usize, total_epochs: usize, base_lr: f64, min_lr: f64) -> f64 {
    let warmup = warmup_epochs as f64;
    if epoch < warmup {
        return base_lr * epoch / warmup;
    }
    let span = (total_epochs as f64 - warmup).max(f64::MIN_POSITIVE);
    let progress = ((epoch - warmup) / span).clamp(0.0, 1.0);
    min_lr + (base_lr - min_lr) * 0.5 * (1.0 + (PI * progress).cos())
}

/// Layer index for layer-wise decay: embeddings are 0, block `i` is `i + 1`,
/// everything after the last block is `depth + 1`.
pub fn layer_id(name: &str, depth: usize) -> usize {
    let local = name.strip_prefix("encoder.").unwrap_or(name);
    if local.starts_with("patch_embed") || local == "cls_token" {
        return 0;
    }
    if let Some(rest) = local.strip_prefix("blocks.") {
        if let Some(i) = rest.split('.').next().and_then(|s| s.parse::<usize>().ok()) {
            return i + 1;
        }
    }
    depth + 1
}

pub fn layer_scale(name: &str, depth: usize, decay: f64) -> f64 {
    decay.powi((depth + 1 - layer_id(name, depth)) as i32)
}
