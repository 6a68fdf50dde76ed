//! Crop / bilinear resize / mirror on single planes and RGB images.
//!
//! Resizing follows the half-pixel (align-corners = false) convention with
//! source coordinates clamped to the crop window, so a crop is materialized
//! before it is resized.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

/// Integer crop window in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl CropBox {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            x: 0,
            y: 0,
            width,
            height,
        }
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.width > 0 && self.height > 0 && self.x + self.width <= width && self.y + self.height <= height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }
}

/// Source sample positions and weights along one axis.
fn axis_taps(out_len: usize, crop_start: usize, crop_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = crop_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(crop_len - 1);
            let i1 = (i0 + 1).min(crop_len - 1);
            let frac = (src - i0 as f64).clamp(0.0, 1.0);
            (crop_start + i0, crop_start + i1, frac)
        })
        .collect()
}

pub fn crop_resize_plane(src: ArrayView2<f64>, crop: CropBox, out_h: usize, out_w: usize, flip: bool) -> Array2<f64> {
    let ys = axis_taps(out_h, crop.y, crop.height);
    let xs = axis_taps(out_w, crop.x, crop.width);
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let ox = if flip { out_w - 1 - ox } else { ox };
        let (y0, y1, fy) = ys[oy];
        let (x0, x1, fx) = xs[ox];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

pub fn crop_resize_image(src: ArrayView3<f64>, crop: CropBox, out_h: usize, out_w: usize, flip: bool) -> Array3<f64> {
    let ys = axis_taps(out_h, crop.y, crop.height);
    let xs = axis_taps(out_w, crop.x, crop.width);
    let channels = src.dim().2;
    Array3::from_shape_fn((out_h, out_w, channels), |(oy, ox, c)| {
        let ox = if flip { out_w - 1 - ox } else { ox };
        let (y0, y1, fy) = ys[oy];
        let (x0, x1, fx) = xs[ox];
        let top = src[[y0, x0, c]] * (1.0 - fx) + src[[y0, x1, c]] * fx;
        let bottom = src[[y1, x0, c]] * (1.0 - fx) + src[[y1, x1, c]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Bilinear resize of a whole plane.
pub fn resize_plane(src: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    crop_resize_plane(src, CropBox::full(h, w), out_h, out_w, false)
}

/// Mean of each non-overlapping `p × p` block, raster order.
pub fn mean_pool(src: ArrayView2<f64>, p: usize) -> Vec<f64> {
    let (h, w) = src.dim();
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let block = src.slice(ndarray::s![gy * p..(gy + 1) * p, gx * p..(gx + 1) * p]);
            out.push(block.sum() / (p * p) as f64);
        }
    }
    out
}
