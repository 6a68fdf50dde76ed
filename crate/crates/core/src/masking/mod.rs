//! Supervised attention-driven masking plus random and attention-only baselines.

pub mod partition;
pub mod weights;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

pub use partition::{
    apply_partition, partition, random_partition, random_partition_with_rng, sample_indices, sample_indices_with_rng,
    MaskingRatios, PartitionedTokens, SampleIndex, SamplingMode, TokenPartition, WEIGHT_FLOOR,
};
pub use weights::{
    attention_only_weights, extract_masking_weights, min_max_normalize, pixel_map_to_patch_weights,
    weights_to_pixel_map, MaskingWeights,
};

use crate::error::{Error, Result};

/// How a pre-training run chooses its partitions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingStrategy {
    /// Uniformly random permutation every step.
    Random,
    /// Class-token attention of a model trained without the classification loss.
    Amt,
    /// Class-token attention of a model trained with the classification loss.
    #[default]
    Sam,
}

impl MaskingStrategy {
    pub fn uses_attention(&self) -> bool {
        !matches!(self, MaskingStrategy::Random)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MaskingStrategy::Random => "random",
            MaskingStrategy::Amt => "amt",
            MaskingStrategy::Sam => "sam",
        }
    }
}

impl std::str::FromStr for MaskingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "amt" => Ok(Self::Amt),
            "sam" => Ok(Self::Sam),
            other => Err(Error::Config {
                field: "strategy".into(),
                reason: format!("unknown strategy `{other}` (expected random, amt or sam)"),
            }),
        }
    }
}

/// Per-image weight maps keyed by image id. Reads may run concurrently;
/// refreshes take the write lock for the whole swap.
#[derive(Debug, Default)]
pub struct WeightCache {
    entries: RwLock<HashMap<String, MaskingWeights>>,
}

impl WeightCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, image_id: &str) -> Option<MaskingWeights> {
        self.entries.read().expect("weight cache poisoned").get(image_id).cloned()
    }

    pub fn with<T>(&self, image_id: &str, f: impl FnOnce(&MaskingWeights) -> T) -> Result<T> {
        let guard = self.entries.read().expect("weight cache poisoned");
        guard
            .get(image_id)
            .map(f)
            .ok_or_else(|| Error::MissingWeights(image_id.to_string()))
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.entries.read().expect("weight cache poisoned").contains_key(image_id)
    }

    /// Replaces the whole cache in one exclusive step.
    pub fn replace_all(&self, entries: impl IntoIterator<Item = MaskingWeights>) {
        let fresh: HashMap<String, MaskingWeights> = entries.into_iter().map(|w| (w.image_id.clone(), w)).collect();
        *self.entries.write().expect("weight cache poisoned") = fresh;
    }

    pub fn insert(&self, weights: MaskingWeights) {
        self.entries
            .write()
            .expect("weight cache poisoned")
            .insert(weights.image_id.clone(), weights);
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("weight cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sorted copy of every entry.
    pub fn snapshot(&self) -> BTreeMap<String, MaskingWeights> {
        self.entries
            .read()
            .expect("weight cache poisoned")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

/// JSON side of one mask-dump record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDumpRecord {
    pub image_id: String,
    pub epoch: usize,
    /// File name of the 16-bit grayscale weight map, relative to the record.
    pub pixel_map: String,
    pub partition: TokenPartition,
}

/// File-system safe stem for an image id.
pub fn file_stem(image_id: &str) -> String {
    image_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

pub fn save_pixel_map_png16(map: &ndarray::Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = map[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(v * 65535.0).round() as u16])
    });
    img.save(path)?;
    Ok(())
}

pub fn load_pixel_map_png16(path: &Path) -> Result<ndarray::Array2<f64>> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Ok(ndarray::Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0] as f64 / 65535.0
    }))
}

/// Writes `<stem>.png` (16-bit weight map) and `<stem>.json` into `dir`.
pub fn write_mask_dump(dir: &Path, weights: &MaskingWeights, part: &TokenPartition) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let stem = file_stem(&weights.image_id);
    let png = dir.join(format!("{stem}.png"));
    let json = dir.join(format!("{stem}.json"));
    save_pixel_map_png16(&weights.pixel_map, &png)?;
    let record = MaskDumpRecord {
        image_id: weights.image_id.clone(),
        epoch: weights.source_epoch,
        pixel_map: format!("{stem}.png"),
        partition: part.clone(),
    };
    std::fs::write(&json, serde_json::to_string_pretty(&record)?)?;
    Ok((png, json))
}
