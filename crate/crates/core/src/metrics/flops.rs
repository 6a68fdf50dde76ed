//! Closed-form operation counts for the encoder path.
//!
//! Per block with `n` tokens of width `d`: `4nd² + 2n²d` for attention
//! (qkv + output projections, scores and weighted values) and `8nd²` for the
//! MLP. The patch embedding covers all `N` patches and the head runs once.
//! Norms, softmax and activations are not counted.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::PatchConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacConvention {
    /// One multiply-accumulate is one operation.
    #[default]
    OneOp,
    /// One multiply-accumulate is two operations.
    TwoOp,
}

impl MacConvention {
    pub fn factor(&self) -> u64 {
        match self {
            MacConvention::OneOp => 1,
            MacConvention::TwoOp => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub token_count: usize,
    pub convention: MacConvention,
    pub encoder_flops: u64,
    pub decoder_flops: u64,
    pub head_flops: u64,
    /// `patch_embed`, `attention`, `mlp`, `decoder`, `head`.
    pub breakdown: BTreeMap<String, u64>,
}

impl FlopsReport {
    pub fn total(&self) -> u64 {
        self.encoder_flops + self.decoder_flops + self.head_flops
    }

    pub fn giga(&self) -> f64 {
        self.total() as f64 / 1e9
    }
}

/// `(attention, mlp)` MACs of one block.
pub fn block_macs(n: u64, d: u64, mlp_ratio: u64) -> (u64, u64) {
    (4 * n * d * d + 2 * n * n * d, 2 * mlp_ratio * n * d * d)
}

/// Encoder + head cost of one forward pass over `token_count` tokens
/// (class token included).
pub fn count_flops(cfg: &PatchConfig, token_count: usize, convention: MacConvention) -> FlopsReport {
    let f = convention.factor();
    let (n, d) = (token_count as u64, cfg.embed_dim as u64);
    let (attn, mlp) = block_macs(n, d, cfg.mlp_ratio as u64);
    let depth = cfg.encoder_depth as u64;
    let embed = cfg.num_patches() as u64 * cfg.patch_dim() as u64 * d;
    let head = d * cfg.num_classes as u64;
    let mut breakdown = BTreeMap::new();
    breakdown.insert("patch_embed".to_string(), f * embed);
    breakdown.insert("attention".to_string(), f * depth * attn);
    breakdown.insert("mlp".to_string(), f * depth * mlp);
    breakdown.insert("decoder".to_string(), 0);
    breakdown.insert("head".to_string(), f * head);
    FlopsReport {
        token_count,
        convention,
        encoder_flops: f * (embed + depth * (attn + mlp)),
        decoder_flops: 0,
        head_flops: f * head,
        breakdown,
    }
}

/// Pre-training cost: encoder over `visible + 1` tokens plus the decoder over
/// `visible + masked` tokens and its pixel projection on masked rows.
pub fn count_pretrain_flops(cfg: &PatchConfig, visible: usize, masked: usize, convention: MacConvention) -> FlopsReport {
    let mut report = count_flops(cfg, visible + 1, convention);
    let f = convention.factor();
    let (dd, d) = (cfg.decoder_dim as u64, cfg.embed_dim as u64);
    let m = (visible + masked) as u64;
    let (attn, mlp) = block_macs(m, dd, cfg.mlp_ratio as u64);
    let dec = visible as u64 * d * dd + cfg.decoder_depth as u64 * (attn + mlp) + masked as u64 * dd * cfg.patch_dim() as u64;
    report.decoder_flops = f * dec;
    report.breakdown.insert("decoder".to_string(), f * dec);
    report
}
