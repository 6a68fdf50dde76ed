//! Random resized crop + horizontal flip, recorded so the exact same warp can
//! be replayed onto masking weights and lesion masks.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::imageops::{crop_resize_image, crop_resize_plane, CropBox};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub crop_box: CropBox,
    pub flip: bool,
    pub output_height: usize,
    pub output_width: usize,
}

impl AugmentationRecord {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            crop_box: CropBox::full(height, width),
            flip: false,
            output_height: height,
            output_width: width,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentPolicy {
    /// Random resized crop over `scale` of the area with aspect ratio in
    /// `ratio`, then a horizontal flip with probability `flip_prob`.
    Train {
        scale: (f64, f64),
        ratio: (f64, f64),
        flip_prob: f64,
    },
    /// Largest centered square, resized. Deterministic.
    Eval,
}

impl AugmentPolicy {
    pub fn train_default() -> Self {
        AugmentPolicy::Train {
            scale: (0.2, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
        }
    }
}

fn center_square(height: usize, width: usize) -> CropBox {
    let side = height.min(width);
    CropBox {
        x: (width - side) / 2,
        y: (height - side) / 2,
        width: side,
        height: side,
    }
}

fn random_resized_crop<R: Rng + ?Sized>(height: usize, width: usize, scale: (f64, f64), ratio: (f64, f64), rng: &mut R) -> CropBox {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let aspect = rng.random_range(log_lo..=log_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let y = rng.random_range(0..=height - h);
            let x = rng.random_range(0..=width - w);
            return CropBox { x, y, width: w, height: h };
        }
    }
    // Fallback: center crop clamped to the allowed aspect range.
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < ratio.0 {
        (width, ((width as f64 / ratio.0).round() as usize).clamp(1, height))
    } else if in_ratio > ratio.1 {
        (((height as f64 * ratio.1).round() as usize).clamp(1, width), height)
    } else {
        (width, height)
    };
    CropBox {
        x: (width - w) / 2,
        y: (height - h) / 2,
        width: w,
        height: h,
    }
}

/// The deterministic evaluation record: centered square, resized.
pub fn eval_record(height: usize, width: usize, output_height: usize, output_width: usize) -> AugmentationRecord {
    AugmentationRecord {
        crop_box: center_square(height, width),
        flip: false,
        output_height,
        output_width,
    }
}

/// Draws a record under `policy` for a `height × width` canonical image.
pub fn sample_record<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    policy: &AugmentPolicy,
    output_height: usize,
    output_width: usize,
    rng: &mut R,
) -> AugmentationRecord {
    match *policy {
        AugmentPolicy::Eval => eval_record(height, width, output_height, output_width),
        AugmentPolicy::Train { scale, ratio, flip_prob } => {
            let crop_box = random_resized_crop(height, width, scale, ratio, rng);
            let flip = rng.random::<f64>() < flip_prob;
            AugmentationRecord {
                crop_box,
                flip,
                output_height,
                output_width,
            }
        }
    }
}

pub fn apply_record(image: ArrayView3<f64>, record: &AugmentationRecord) -> Array3<f64> {
    crop_resize_image(
        image,
        record.crop_box,
        record.output_height,
        record.output_width,
        record.flip,
    )
}

/// Replays the record onto a binary mask (bilinear, thresholded at 0.5).
pub fn apply_record_mask(mask: ArrayView2<bool>, record: &AugmentationRecord) -> Array2<bool> {
    let as_f = mask.mapv(|b| if b { 1.0 } else { 0.0 });
    crop_resize_plane(
        as_f.view(),
        record.crop_box,
        record.output_height,
        record.output_width,
        record.flip,
    )
    .mapv(|v| v >= 0.5)
}

pub fn augment<R: Rng + ?Sized>(
    image: ArrayView3<f64>,
    policy: &AugmentPolicy,
    output_height: usize,
    output_width: usize,
    rng: &mut R,
) -> (Array3<f64>, AugmentationRecord) {
    let (h, w, _) = image.dim();
    let record = sample_record(h, w, policy, output_height, output_width, rng);
    (apply_record(image, &record), record)
}
