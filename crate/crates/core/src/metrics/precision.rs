use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::TokenPartition;
use crate::model::PatchConfig;

/// Minimum fraction of lesion pixels for a patch to count as lesion.
pub const LESION_PATCH_THRESHOLD: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPrecisionReport {
    /// Masked lesion patches over all lesion patches (micro-averaged).
    pub lesion_mask_rate: f64,
    /// Masked background patches over all background patches.
    pub background_mask_rate: f64,
    /// Images whose highest-weight patch is a lesion patch. Absent when no
    /// weights were supplied.
    pub argmax_hit_rate: Option<f64>,
    pub num_images: usize,
    pub lesion_patches: usize,
    pub background_patches: usize,
}

/// Per-patch lesion flags in raster order.
pub fn lesion_patches(mask: &Array2<bool>, patch_size: usize) -> Vec<bool> {
    let (h, w) = mask.dim();
    let area = (patch_size * patch_size) as f64;
    let mut out = Vec::with_capacity((h / patch_size) * (w / patch_size));
    for gy in 0..h / patch_size {
        for gx in 0..w / patch_size {
            let block = mask.slice(s![
                gy * patch_size..(gy + 1) * patch_size,
                gx * patch_size..(gx + 1) * patch_size
            ]);
            let hit = block.iter().filter(|&&b| b).count() as f64;
            out.push(hit / area >= LESION_PATCH_THRESHOLD);
        }
    }
    out
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Compares partitions with ground-truth lesion masks at model resolution.
/// `patch_weights`, when given, holds one weight vector per image for the
/// argmax check.
pub fn mask_precision(
    partitions: &[TokenPartition],
    patch_weights: Option<&[Vec<f64>]>,
    lesion_masks: &[Array2<bool>],
    cfg: &PatchConfig,
) -> Result<MaskPrecisionReport> {
    if partitions.len() != lesion_masks.len() {
        return Err(Error::Dimension(format!(
            "{} partitions for {} lesion masks",
            partitions.len(),
            lesion_masks.len()
        )));
    }
    if let Some(w) = patch_weights {
        if w.len() != partitions.len() {
            return Err(Error::Dimension(format!("{} weight vectors for {} partitions", w.len(), partitions.len())));
        }
    }
    let n = cfg.num_patches();
    let (mut lesion, mut lesion_masked, mut bg, mut bg_masked, mut hits) = (0, 0, 0, 0, 0);
    for (i, (part, mask)) in partitions.iter().zip(lesion_masks).enumerate() {
        if mask.dim() != (cfg.image_height, cfg.image_width) {
            return Err(Error::Shape {
                expected: format!("({}, {})", cfg.image_height, cfg.image_width),
                actual: format!("{:?}", mask.dim()),
            });
        }
        if !part.is_cover_of(n) {
            return Err(Error::Dimension(format!("partition {i} is not a cover of {n} patches")));
        }
        let flags = lesion_patches(mask, cfg.patch_size);
        let mut masked = vec![false; n];
        for &m in &part.mask {
            masked[m] = true;
        }
        for (is_lesion, is_masked) in flags.iter().zip(&masked) {
            match (is_lesion, is_masked) {
                (true, true) => {
                    lesion += 1;
                    lesion_masked += 1;
                }
                (true, false) => lesion += 1,
                (false, true) => {
                    bg += 1;
                    bg_masked += 1;
                }
                (false, false) => bg += 1,
            }
        }
        if let Some(w) = patch_weights {
            let best = w[i]
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (j, &x)| if x > b.1 { (j, x) } else { b })
                .0;
            hits += usize::from(flags[best]);
        }
    }
    Ok(MaskPrecisionReport {
        lesion_mask_rate: ratio(lesion_masked, lesion),
        background_mask_rate: ratio(bg_masked, bg),
        argmax_hit_rate: patch_weights.map(|_| ratio(hits, partitions.len())),
        num_images: partitions.len(),
        lesion_patches: lesion,
        background_patches: bg,
    })
}
