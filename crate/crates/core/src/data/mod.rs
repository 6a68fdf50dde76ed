//! Labeled image datasets: synthetic lesions with ground-truth masks and
//! directory-per-class folders.

pub mod augment;
pub mod folder;
pub mod synthetic;

use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use augment::{apply_record, apply_record_mask, augment, eval_record, sample_record, AugmentPolicy, AugmentationRecord};
pub use folder::load_image_folder;
pub use synthetic::{generate_synthetic_lesion_dataset, LesionFamily};

use crate::error::{Error, Result};

/// One image at canonical resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Stable key: relative path for folders, `synth/<index>` for generated data.
    pub image_id: String,
    /// `H × W × 3`, values in `[0, 1]`.
    pub image: Array3<f64>,
    pub label: usize,
    /// Ground-truth lesion pixels, when known.
    pub lesion_mask: Option<Array2<bool>>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn normalize(&self, image: ArrayView3<f64>) -> Array3<f64> {
        let mut out = image.to_owned();
        for ((_, _, c), v) in out.indexed_iter_mut() {
            *v = (*v - self.mean[c]) / self.std[c];
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Mean/std over every pixel of every sample.
    pub fn channel_stats(&self) -> ChannelStats {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0usize;
        for s in &self.samples {
            for ((_, _, c), v) in s.image.indexed_iter() {
                sum[c] += v;
                sq[c] += v * v;
            }
            count += s.height() * s.width();
        }
        if count == 0 {
            return ChannelStats::identity();
        }
        let n = count as f64;
        let mut stats = ChannelStats::identity();
        for c in 0..3 {
            let mean = sum[c] / n;
            stats.mean[c] = mean;
            stats.std[c] = (sq[c] / n - mean * mean).max(0.0).sqrt().max(1e-6);
        }
        stats
    }

    /// Deterministic split: samples are ranked by `sha256(seed ‖ image_id)` and
    /// the first `round(train_fraction · n)` go to the training side.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::Config {
                field: "train_fraction".into(),
                reason: format!("{train_fraction} is outside [0, 1]"),
            });
        }
        let mut keyed: Vec<([u8; 32], &Sample)> = self
            .samples
            .iter()
            .map(|s| {
                let mut h = Sha256::new();
                h.update(seed.to_le_bytes());
                h.update(s.image_id.as_bytes());
                (h.finalize().into(), s)
            })
            .collect();
        keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.image_id.cmp(&b.1.image_id)));
        let n_train = (train_fraction * self.len() as f64).round() as usize;
        let take = |range: &[([u8; 32], &Sample)]| Dataset {
            samples: range.iter().map(|(_, s)| (*s).clone()).collect(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
        };
        Ok((take(&keyed[..n_train]), take(&keyed[n_train..])))
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        Dataset {
            samples: self.samples.iter().take(n).cloned().collect(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
        }
    }
}
