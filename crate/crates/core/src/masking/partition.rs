//! Ranked sampling of patch indices and the mask / throw / visible split.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenSequence;

/// Added to every weight before taking its log in stochastic sampling.
pub const WEIGHT_FLOOR: f64 = 1e-6;

const RATIO_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingRatios {
    pub mask_ratio: f64,
    pub throw_ratio: f64,
}

impl MaskingRatios {
    pub fn new(mask_ratio: f64, throw_ratio: f64) -> Result<Self> {
        let r = Self { mask_ratio, throw_ratio };
        r.validate()?;
        Ok(r)
    }

    /// Mask 0.45, throw 0.30.
    pub fn sam_default() -> Self {
        Self {
            mask_ratio: 0.45,
            throw_ratio: 0.30,
        }
    }

    /// Mask 0.75, throw 0.
    pub fn mae_default() -> Self {
        Self {
            mask_ratio: 0.75,
            throw_ratio: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("mask_ratio", self.mask_ratio), ("throw_ratio", self.throw_ratio)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config {
                    field: field.into(),
                    reason: format!("{v} is outside [0, 1]"),
                });
            }
        }
        let sum = self.mask_ratio + self.throw_ratio;
        if sum > 1.0 + RATIO_SLACK {
            return Err(Error::RatioSum { sum });
        }
        Ok(())
    }

    /// `(|mask|, |throw|, |vis|)` for `n` patches, using `⌊n·r⌋` and `⌊n·(r+t)⌋`.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let n_mask = ((n as f64 * self.mask_ratio).floor() as usize).min(n);
        let n_cut = ((n as f64 * (self.mask_ratio + self.throw_ratio)).floor() as usize).clamp(n_mask, n);
        (n_mask, n_cut - n_mask, n - n_cut)
    }

    /// Tokens entering the encoder, class token included.
    pub fn encoder_tokens(&self, n: usize) -> usize {
        self.counts(n).2 + 1
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Gumbel-top-k: weighted sampling without replacement.
    #[default]
    Stochastic,
    /// Stable descending sort, ties by ascending index.
    Deterministic,
}

/// A permutation of `0..N`, highest-priority patch first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleIndex {
    pub order: Vec<usize>,
}

impl SampleIndex {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &i in &order {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            if seen[i] {
                return Err(Error::Dimension(format!("index {i} appears twice in sample order")));
            }
            seen[i] = true;
        }
        Ok(Self { order })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

pub fn sample_indices_with_rng<R: Rng + ?Sized>(weights: &[f64], mode: SamplingMode, rng: &mut R) -> SampleIndex {
    let keys: Vec<f64> = match mode {
        SamplingMode::Deterministic => weights.to_vec(),
        SamplingMode::Stochastic => {
            let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
            weights
                .iter()
                .map(|&w| (w.max(0.0) + WEIGHT_FLOOR).ln() + gumbel.sample(rng))
                .collect()
        }
    };
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Stable sort keeps ascending index order among equal keys.
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]));
    SampleIndex { order }
}

pub fn sample_indices(weights: &[f64], mode: SamplingMode, seed: u64) -> SampleIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_indices_with_rng(weights, mode, &mut rng)
}

/// Patch-index split. Indices address patch tokens `0..N`; the class token is
/// never listed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPartition {
    pub mask: Vec<usize>,
    pub throw: Vec<usize>,
    pub vis: Vec<usize>,
}

impl TokenPartition {
    /// All patches visible.
    pub fn all_visible(n: usize) -> Self {
        Self {
            mask: Vec::new(),
            throw: Vec::new(),
            vis: (0..n).collect(),
        }
    }

    pub fn num_patches(&self) -> usize {
        self.mask.len() + self.throw.len() + self.vis.len()
    }

    /// Checks the exact-disjoint-cover property over `0..n`.
    pub fn is_cover_of(&self, n: usize) -> bool {
        if self.num_patches() != n {
            return false;
        }
        let mut seen = vec![false; n];
        for &i in self.mask.iter().chain(&self.throw).chain(&self.vis) {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        true
    }
}

pub fn partition(order: &SampleIndex, ratios: &MaskingRatios, n: usize) -> Result<TokenPartition> {
    ratios.validate()?;
    if order.len() != n {
        return Err(Error::Dimension(format!(
            "sample order has {} entries for {n} patches",
            order.len()
        )));
    }
    let (n_mask, n_throw, _) = ratios.counts(n);
    let cut = n_mask + n_throw;
    Ok(TokenPartition {
        mask: order.order[..n_mask].to_vec(),
        throw: order.order[n_mask..cut].to_vec(),
        vis: order.order[cut..].to_vec(),
    })
}

pub fn random_partition_with_rng<R: Rng + ?Sized>(n: usize, ratios: &MaskingRatios, rng: &mut R) -> Result<TokenPartition> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    partition(&SampleIndex { order }, ratios, n)
}

/// Uniformly random permutation sliced like [`partition`]; plain MAE masking
/// when the throw ratio is zero.
pub fn random_partition(n: usize, ratios: &MaskingRatios, seed: u64) -> Result<TokenPartition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_partition_with_rng(n, ratios, &mut rng)
}

/// Gathered token rows for one image.
#[derive(Clone, Debug)]
pub struct PartitionedTokens {
    /// `[cls, x_vis]`, `(|vis| + 1) × d`.
    pub visible_with_cls: Array2<f64>,
    /// `|mask| × d`.
    pub masked: Array2<f64>,
    pub mask_order: Vec<usize>,
}

pub fn apply_partition(tokens: &TokenSequence, part: &TokenPartition) -> Result<PartitionedTokens> {
    let n = tokens.num_patch_tokens();
    if let Some(&index) = part.mask.iter().chain(&part.throw).chain(&part.vis).find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index, len: n });
    }
    let mut rows = Vec::with_capacity(part.vis.len() + 1);
    rows.push(0);
    rows.extend(part.vis.iter().map(|i| i + 1));
    let mask_rows: Vec<usize> = part.mask.iter().map(|i| i + 1).collect();
    Ok(PartitionedTokens {
        visible_with_cls: tokens.tokens.select(Axis(0), &rows),
        masked: tokens.tokens.select(Axis(0), &mask_rows),
        mask_order: part.mask.clone(),
    })
}
