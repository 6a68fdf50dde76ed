use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::masking::{file_stem, MaskingWeights, TokenPartition};
use crate::model::PatchConfig;

pub const HEATMAP_ALPHA: f64 = 0.5;
/// Gray level painted over masked patches.
pub const MASK_GRAY: f64 = 0.5;
/// Gray level painted over thrown patches.
pub const THROW_GRAY: f64 = 0.15;

/// Piecewise-linear blue → cyan → yellow → red colormap on `[0, 1]`.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let stops = [[0.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
    let x = v * 3.0;
    let i = (x.floor() as usize).min(2);
    let f = x - i as f64;
    [0, 1, 2].map(|c| stops[i][c] * (1.0 - f) + stops[i + 1][c] * f)
}

/// Image blended with the colormapped weight map.
pub fn heatmap_overlay(image: ArrayView3<f64>, weights: &MaskingWeights) -> Result<Array3<f64>> {
    let (h, w, _) = image.dim();
    if weights.pixel_map.dim() != (h, w) {
        return Err(Error::Shape {
            expected: format!("({h}, {w})"),
            actual: format!("{:?}", weights.pixel_map.dim()),
        });
    }
    Ok(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let tint = colormap(weights.pixel_map[[y, x]])[c];
        (1.0 - HEATMAP_ALPHA) * image[[y, x, c]] + HEATMAP_ALPHA * tint
    }))
}

/// Image with masked and thrown patches painted in two gray levels.
pub fn partition_overlay(image: ArrayView3<f64>, part: &TokenPartition, cfg: &PatchConfig) -> Result<Array3<f64>> {
    let (h, w, _) = image.dim();
    if (h, w) != (cfg.image_height, cfg.image_width) {
        return Err(Error::Shape {
            expected: format!("({}, {})", cfg.image_height, cfg.image_width),
            actual: format!("({h}, {w})"),
        });
    }
    if !part.is_cover_of(cfg.num_patches()) {
        return Err(Error::Dimension(format!(
            "partition does not cover {} patches",
            cfg.num_patches()
        )));
    }
    let mut out = image.to_owned();
    let p = cfg.patch_size;
    let gw = cfg.grid_width();
    for (ids, level) in [(&part.mask, MASK_GRAY), (&part.throw, THROW_GRAY)] {
        for &i in ids {
            let (gy, gx) = (i / gw, i % gw);
            out.slice_mut(ndarray::s![gy * p..(gy + 1) * p, gx * p..(gx + 1) * p, ..])
                .fill(level);
        }
    }
    Ok(out)
}

pub fn to_rgb8(image: ArrayView3<f64>) -> RgbImage {
    let (h, w, _) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Writes `<stem>_heatmap.png` and `<stem>_partition.png` into `out_dir`.
pub fn export_overlays(
    image: ArrayView3<f64>,
    weights: &MaskingWeights,
    part: &TokenPartition,
    cfg: &PatchConfig,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir)?;
    let stem = file_stem(&weights.image_id);
    let heat = out_dir.join(format!("{stem}_heatmap.png"));
    let parts = out_dir.join(format!("{stem}_partition.png"));
    to_rgb8(heatmap_overlay(image, weights)?.view()).save(&heat)?;
    to_rgb8(partition_overlay(image, part, cfg)?.view()).save(&parts)?;
    Ok((heat, parts))
}
