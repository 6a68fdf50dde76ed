//! Raster-order patch extraction and fixed 2-D sine-cosine positional embeddings.

use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis};

use super::config::PatchConfig;
use crate::error::{Error, Result};

/// A batch of RGB images, `B × H × W × 3`, values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    pub pixels: Array4<f64>,
    pub labels: Vec<usize>,
}

impl ImageBatch {
    pub fn new(pixels: Array4<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let b = pixels.len_of(Axis(0));
        if b == 0 {
            return Err(Error::Dimension("batch must contain at least one image".into()));
        }
        if pixels.len_of(Axis(3)) != 3 {
            return Err(Error::Shape {
                expected: "B×H×W×3".into(),
                actual: format!("{:?}", pixels.shape()),
            });
        }
        if labels.len() != b {
            return Err(Error::Dimension(format!("{} labels for {b} images", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidLabel { label, num_classes });
        }
        Ok(Self { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Splits one `H × W × 3` image into `N × (p²·3)` rows. Each row is laid out
/// as (row within patch, column within patch, channel).
pub fn patchify_image(image: ArrayView3<f64>, patch_size: usize) -> Result<Array2<f64>> {
    let (h, w, c) = image.dim();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Dimension(format!(
            "image {h}x{w} is not divisible by patch size {patch_size}"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let dim = patch_size * patch_size * c;
    let mut out = Array2::zeros((gh * gw, dim));
    for gy in 0..gh {
        for gx in 0..gw {
            let block = image.slice(s![
                gy * patch_size..(gy + 1) * patch_size,
                gx * patch_size..(gx + 1) * patch_size,
                ..
            ]);
            let mut row = out.row_mut(gy * gw + gx);
            for (dst, src) in row.iter_mut().zip(block.iter()) {
                *dst = *src;
            }
        }
    }
    Ok(out)
}

pub fn unpatchify_image(
    patches: &Array2<f64>,
    grid_height: usize,
    grid_width: usize,
    patch_size: usize,
) -> Result<Array3<f64>> {
    let dim = patch_size * patch_size * 3;
    if patches.nrows() != grid_height * grid_width || patches.ncols() != dim {
        return Err(Error::Shape {
            expected: format!("{}×{dim}", grid_height * grid_width),
            actual: format!("{}×{}", patches.nrows(), patches.ncols()),
        });
    }
    let mut image = Array3::zeros((grid_height * patch_size, grid_width * patch_size, 3));
    for gy in 0..grid_height {
        for gx in 0..grid_width {
            let mut block = image.slice_mut(s![
                gy * patch_size..(gy + 1) * patch_size,
                gx * patch_size..(gx + 1) * patch_size,
                ..
            ]);
            for (dst, src) in block.iter_mut().zip(patches.row(gy * grid_width + gx).iter()) {
                *dst = *src;
            }
        }
    }
    Ok(image)
}

/// `B × H × W × 3` to `B × N × (p²·3)`.
pub fn patchify(batch: &ImageBatch, cfg: &PatchConfig) -> Result<Array3<f64>> {
    let (b, h, w, _) = batch.pixels.dim();
    if h != cfg.image_height || w != cfg.image_width {
        return Err(Error::Dimension(format!(
            "batch images are {h}x{w}, config expects {}x{}",
            cfg.image_height, cfg.image_width
        )));
    }
    let mut out = Array3::zeros((b, cfg.num_patches(), cfg.patch_dim()));
    for (i, img) in batch.pixels.outer_iter().enumerate() {
        let p = patchify_image(img, cfg.patch_size)?;
        out.index_axis_mut(Axis(0), i).assign(&p);
    }
    Ok(out)
}

pub fn unpatchify(patches: &Array3<f64>, cfg: &PatchConfig) -> Result<Array4<f64>> {
    let b = patches.len_of(Axis(0));
    let mut out = Array4::zeros((b, cfg.image_height, cfg.image_width, 3));
    for (i, p) in patches.outer_iter().enumerate() {
        let img = unpatchify_image(&p.to_owned(), cfg.grid_height(), cfg.grid_width(), cfg.patch_size)?;
        out.index_axis_mut(Axis(0), i).assign(&img);
    }
    Ok(out)
}

fn sincos_1d(dim: usize, pos: f64, out: &mut [f64]) {
    let half = dim / 2;
    for i in 0..half {
        let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
        out[i] = (pos * omega).sin();
        out[half + i] = (pos * omega).cos();
    }
}

/// Fixed 2-D sine-cosine table of shape `(gh·gw [+1]) × dim`. The first half
/// of each row encodes the column coordinate, the second half the row
/// coordinate. With `with_cls`, a zero row is prepended for the class token.
pub fn sincos_pos_embed_2d(dim: usize, grid_height: usize, grid_width: usize, with_cls: bool) -> Array2<f64> {
    assert!(dim.is_multiple_of(4), "sine-cosine embedding width must be a multiple of 4");
    let offset = usize::from(with_cls);
    let mut table = Array2::zeros((grid_height * grid_width + offset, dim));
    let half = dim / 2;
    for gy in 0..grid_height {
        for gx in 0..grid_width {
            let mut row = table.row_mut(offset + gy * grid_width + gx);
            let row = row.as_slice_mut().expect("standard layout");
            sincos_1d(half, gx as f64, &mut row[..half]);
            sincos_1d(half, gy as f64, &mut row[half..]);
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn ramp(h: usize, w: usize) -> Array3<f64> {
        Array::from_shape_fn((h, w, 3), |(y, x, c)| (y * 1000 + x * 10 + c) as f64)
    }

    #[test]
    fn vit_base_patch_count() {
        let img = Array3::<f64>::zeros((224, 224, 3));
        let p = patchify_image(img.view(), 16).unwrap();
        assert_eq!(p.dim(), (196, 768));
    }

    #[test]
    fn single_patch_is_flattened_image() {
        let img = ramp(16, 16);
        let p = patchify_image(img.view(), 16).unwrap();
        assert_eq!(p.nrows(), 1);
        let flat: Vec<f64> = img.iter().cloned().collect();
        assert_eq!(p.row(0).to_vec(), flat);
    }

    #[test]
    fn four_patches_match_direct_indexing() {
        let img = ramp(32, 32);
        let p = patchify_image(img.view(), 16).unwrap();
        assert_eq!(p.nrows(), 4);
        // Direct indexing oracle: patch k = (gy, gx), entry (dy, dx, c).
        for k in 0..4 {
            let (gy, gx) = (k / 2, k % 2);
            for dy in 0..16 {
                for dx in 0..16 {
                    for c in 0..3 {
                        let v = p[[k, (dy * 16 + dx) * 3 + c]];
                        assert_eq!(v, img[[gy * 16 + dy, gx * 16 + dx, c]]);
                    }
                }
            }
        }
        let back = unpatchify_image(&p, 2, 2, 16).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let img = Array3::<f64>::zeros((30, 32, 3));
        assert!(matches!(patchify_image(img.view(), 16), Err(Error::Dimension(_))));
    }

    #[test]
    fn batch_rejects_bad_labels() {
        let px = Array4::<f64>::zeros((2, 16, 16, 3));
        assert!(matches!(
            ImageBatch::new(px, vec![0, 7], 5),
            Err(Error::InvalidLabel { label: 7, .. })
        ));
    }

    #[test]
    fn pos_embed_2x2_matches_closed_form() {
        let dim = 8;
        let table = sincos_pos_embed_2d(dim, 2, 2, true);
        assert_eq!(table.dim(), (5, 8));
        assert!(table.row(0).iter().all(|&v| v == 0.0));
        // Independent recomputation: quarter = 2 frequencies, omega_i = 10000^(-i/2).
        for gy in 0..2 {
            for gx in 0..2 {
                let row = table.row(1 + gy * 2 + gx);
                let omegas = [1.0, 0.01];
                let expect = [
                    (gx as f64 * omegas[0]).sin(),
                    (gx as f64 * omegas[1]).sin(),
                    (gx as f64 * omegas[0]).cos(),
                    (gx as f64 * omegas[1]).cos(),
                    (gy as f64 * omegas[0]).sin(),
                    (gy as f64 * omegas[1]).sin(),
                    (gy as f64 * omegas[0]).cos(),
                    (gy as f64 * omegas[1]).cos(),
                ];
                for (a, b) in row.iter().zip(expect.iter()) {
                    assert!((a - b).abs() < 1e-15, "{a} vs {b}");
                }
            }
        }
    }
}
