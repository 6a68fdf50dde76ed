//! Class-token attention as per-patch and per-pixel masking weights.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::data::augment::AugmentationRecord;
use crate::error::{Error, Result};
use crate::imageops::{crop_resize_plane, mean_pool, resize_plane};
use crate::model::{AttentionMaps, PatchConfig};

/// Per-image weight map at canonical (pre-augmentation) resolution, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingWeights {
    pub pixel_map: Array2<f64>,
    pub source_epoch: usize,
    pub image_id: String,
}

/// Min-max scaling to `[0, 1]`. A constant vector maps to all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / range).collect()
}

/// Head-averaged class-token row of the last block, class column removed,
/// min-max normalized. Requires a full `N + 1` token pass.
pub fn extract_masking_weights(last_attention: &AttentionMaps, num_patches: usize) -> Result<Vec<f64>> {
    let tokens = last_attention.num_tokens();
    if tokens != num_patches + 1 {
        return Err(Error::NotFullPass {
            expected: num_patches + 1,
            actual: tokens,
        });
    }
    let heads = last_attention.num_heads() as f64;
    let cls_rows = last_attention.per_head.slice(s![.., 0, 1..]);
    let mean: Vec<f64> = cls_rows.sum_axis(ndarray::Axis(0)).iter().map(|v| v / heads).collect();
    Ok(min_max_normalize(&mean))
}

/// Baseline attention-only weights: the same pipeline applied to a model
/// trained without the classification loss.
pub fn attention_only_weights(last_attention: &AttentionMaps, num_patches: usize) -> Result<Vec<f64>> {
    extract_masking_weights(last_attention, num_patches)
}

/// Reshapes to the patch grid and bilinearly upsamples to `height × width`.
pub fn weights_to_pixel_map(
    patch_weights: &[f64],
    cfg: &PatchConfig,
    height: usize,
    width: usize,
    source_epoch: usize,
    image_id: impl Into<String>,
) -> Result<MaskingWeights> {
    if patch_weights.len() != cfg.num_patches() {
        return Err(Error::Dimension(format!(
            "{} weights for {} patches",
            patch_weights.len(),
            cfg.num_patches()
        )));
    }
    let grid = Array2::from_shape_vec((cfg.grid_height(), cfg.grid_width()), patch_weights.to_vec())
        .expect("grid shape matches patch count");
    let pixel_map = resize_plane(grid.view(), height, width).mapv(|v| v.clamp(0.0, 1.0));
    Ok(MaskingWeights {
        pixel_map,
        source_epoch,
        image_id: image_id.into(),
    })
}

/// Replays the augmentation onto the weight map and mean-pools each patch.
pub fn pixel_map_to_patch_weights(
    weights: &MaskingWeights,
    record: &AugmentationRecord,
    cfg: &PatchConfig,
) -> Result<Vec<f64>> {
    if record.output_height != cfg.image_height || record.output_width != cfg.image_width {
        return Err(Error::AugmentationSize {
            expected: cfg.image_height,
            actual: if record.output_height != cfg.image_height {
                record.output_height
            } else {
                record.output_width
            },
        });
    }
    let (h, w) = weights.pixel_map.dim();
    if !record.crop_box.fits(h, w) {
        return Err(Error::Dimension(format!(
            "crop {:?} exceeds {h}x{w} weight map",
            record.crop_box
        )));
    }
    let warped = crop_resize_plane(
        weights.pixel_map.view(),
        record.crop_box,
        record.output_height,
        record.output_width,
        record.flip,
    );
    Ok(mean_pool(warped.view(), cfg.patch_size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageops::CropBox;
    use ndarray::{Array, Array3};

    fn cfg(image: usize, patch: usize) -> PatchConfig {
        PatchConfig {
            image_height: image,
            image_width: image,
            patch_size: patch,
            embed_dim: 8,
            num_heads: 2,
            encoder_depth: 1,
            decoder_dim: 8,
            decoder_depth: 1,
            decoder_heads: 2,
            num_classes: 2,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn uniform_attention_gives_zero_weights() {
        let maps = AttentionMaps {
            per_head: Array3::from_elem((3, 5, 5), 0.2),
            layer_index: 0,
        };
        assert_eq!(extract_masking_weights(&maps, 4).unwrap(), vec![0.0; 4]);
        assert_eq!(attention_only_weights(&maps, 4).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn two_head_mean_then_min_max() {
        // cls rows [cls, p0, p1]: head A [0.1, 0.5, 0.4], head B [0.3, 0.3, 0.4].
        let mut per_head = Array3::from_elem((2, 3, 3), 1.0 / 3.0);
        per_head.slice_mut(s![0, 0, ..]).assign(&ndarray::arr1(&[0.1, 0.5, 0.4]));
        per_head.slice_mut(s![1, 0, ..]).assign(&ndarray::arr1(&[0.3, 0.3, 0.4]));
        let maps = AttentionMaps { per_head, layer_index: 0 };
        // Mean over heads: p0 = 0.4, p1 = 0.4 → constant → zeros.
        assert_eq!(extract_masking_weights(&maps, 2).unwrap(), vec![0.0, 0.0]);

        let mut per_head = Array3::from_elem((2, 4, 4), 0.25);
        per_head.slice_mut(s![0, 0, ..]).assign(&ndarray::arr1(&[0.1, 0.5, 0.4, 0.0]));
        per_head.slice_mut(s![1, 0, ..]).assign(&ndarray::arr1(&[0.3, 0.3, 0.2, 0.2]));
        let maps = AttentionMaps { per_head, layer_index: 0 };
        // Mean: [0.4, 0.3, 0.1] → min-max: [1, 2/3, 0].
        let w = extract_masking_weights(&maps, 3).unwrap();
        let expect = [1.0, 2.0 / 3.0, 0.0];
        for (a, b) in w.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_pass_attention_is_rejected() {
        let maps = AttentionMaps {
            per_head: Array3::from_elem((2, 3, 3), 1.0 / 3.0),
            layer_index: 0,
        };
        assert!(matches!(
            extract_masking_weights(&maps, 4),
            Err(Error::NotFullPass { expected: 5, actual: 3 })
        ));
    }

    #[test]
    fn constant_weights_give_constant_map() {
        let c = cfg(16, 4);
        let m = weights_to_pixel_map(&[0.3; 16], &c, 16, 16, 0, "a").unwrap();
        assert!(m.pixel_map.iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn corner_ordering_is_preserved() {
        let c = cfg(8, 4);
        let m = weights_to_pixel_map(&[0.0, 1.0, 1.0, 0.0], &c, 4, 4, 0, "a").unwrap();
        assert!(m.pixel_map[[0, 0]] < m.pixel_map[[0, 3]]);
        // Direct bilinear formula: column 1 samples source x = 0.25.
        assert!((m.pixel_map[[0, 1]] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn vit_base_grid_upsamples_to_224() {
        let c = PatchConfig::vit_base(5);
        let w: Vec<f64> = (0..196).map(|i| i as f64 / 195.0).collect();
        let m = weights_to_pixel_map(&w, &c, 224, 224, 40, "x").unwrap();
        assert_eq!(m.pixel_map.dim(), (224, 224));
        assert_eq!(m.source_epoch, 40);
    }

    #[test]
    fn identity_replay_keeps_argmax() {
        let c = cfg(32, 8);
        let mut w = vec![0.1; 16];
        w[9] = 1.0;
        let m = weights_to_pixel_map(&w, &c, 32, 32, 0, "a").unwrap();
        let back = pixel_map_to_patch_weights(&m, &AugmentationRecord::identity(32, 32), &c).unwrap();
        let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax(&w), argmax(&back));
    }

    #[test]
    fn flip_mirrors_patch_weights_exactly() {
        let c = cfg(16, 4);
        let map = Array::from_shape_fn((20, 20), |(y, x)| ((y * 3 + x * 5) % 17) as f64 / 16.0);
        let m = MaskingWeights {
            pixel_map: map,
            source_epoch: 0,
            image_id: "a".into(),
        };
        let crop = CropBox { x: 2, y: 1, width: 14, height: 17 };
        let plain = AugmentationRecord { crop_box: crop, flip: false, output_height: 16, output_width: 16 };
        let flipped = AugmentationRecord { flip: true, ..plain };
        let a = pixel_map_to_patch_weights(&m, &plain, &c).unwrap();
        let b = pixel_map_to_patch_weights(&m, &flipped, &c).unwrap();
        for gy in 0..4 {
            for gx in 0..4 {
                assert_eq!(a[gy * 4 + gx], b[gy * 4 + (3 - gx)]);
            }
        }
    }

    #[test]
    fn quadrant_crop_pools_only_that_quadrant() {
        // 8×8 image, 4×4 patches (2×2 grid). Top-left quadrant holds a ramp,
        // everything else is 100 and must not leak into the result.
        let c = cfg(8, 4);
        let map = Array::from_shape_fn((8, 8), |(y, x)| if y < 4 && x < 4 { (y * 4 + x) as f64 / 15.0 } else { 100.0 });
        let m = MaskingWeights { pixel_map: map.clone(), source_epoch: 0, image_id: "q".into() };
        let rec = AugmentationRecord {
            crop_box: CropBox { x: 0, y: 0, width: 4, height: 4 },
            flip: false,
            output_height: 8,
            output_width: 8,
        };
        let got = pixel_map_to_patch_weights(&m, &rec, &c).unwrap();
        // Manual oracle: 2× bilinear upsample of the 4×4 quadrant with clamped
        // half-pixel coordinates, then 4×4 block means.
        let src = |y: isize, x: isize| map[[y.clamp(0, 3) as usize, x.clamp(0, 3) as usize]];
        let mut up = [[0.0f64; 8]; 8];
        for (oy, row) in up.iter_mut().enumerate() {
            for (ox, v) in row.iter_mut().enumerate() {
                let sy = ((oy as f64 + 0.5) / 2.0 - 0.5).max(0.0);
                let sx = ((ox as f64 + 0.5) / 2.0 - 0.5).max(0.0);
                let (y0, x0) = (sy.floor() as isize, sx.floor() as isize);
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                *v = (1.0 - fy) * ((1.0 - fx) * src(y0, x0) + fx * src(y0, x0 + 1))
                    + fy * ((1.0 - fx) * src(y0 + 1, x0) + fx * src(y0 + 1, x0 + 1));
            }
        }
        for gy in 0..2 {
            for gx in 0..2 {
                let mut s = 0.0;
                for y in 0..4 {
                    for x in 0..4 {
                        s += up[gy * 4 + y][gx * 4 + x];
                    }
                }
                assert!((got[gy * 2 + gx] - s / 16.0).abs() < 1e-12);
                assert!(got[gy * 2 + gx] <= 1.0);
            }
        }
    }

    #[test]
    fn wrong_output_size_is_rejected() {
        let c = cfg(16, 4);
        let m = weights_to_pixel_map(&[0.5; 16], &c, 16, 16, 0, "a").unwrap();
        let rec = AugmentationRecord::identity(12, 12);
        assert!(matches!(
            pixel_map_to_patch_weights(&m, &rec, &c),
            Err(Error::AugmentationSize { .. })
        ));
    }
}
