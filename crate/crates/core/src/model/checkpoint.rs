//! Checkpoints are single safetensors archives: every parameter tensor stored
//! as little-endian `f64` under its hierarchical name, plus a JSON metadata
//! record under the `samlab` header key.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::Array2;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::config::PatchConfig;
use super::head::{ClassHead, HeadKind};
use super::layers::Module;
use super::{ImageClassifier, MaskedAutoencoder, VitClassifier};
use crate::data::ChannelStats;
use crate::error::{Error, Result};

const META_KEY: &str = "samlab";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub config: PatchConfig,
    pub epoch: usize,
    pub seed: u64,
    pub head: HeadKind,
    #[serde(default)]
    pub global_pool: bool,
    /// Input normalization the model was trained with.
    #[serde(default)]
    pub normalization: Option<ChannelStats>,
}

pub fn save<P: AsRef<Path>>(path: P, model: &dyn Module, meta: &CheckpointMeta) -> Result<()> {
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    model.visit("", &mut |name, p| {
        let bytes: Vec<u8> = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
        buffers.push((name.to_string(), p.value.shape().to_vec(), bytes));
    });
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut info = HashMap::new();
    info.insert(META_KEY.to_string(), serde_json::to_string(meta)?);
    let bytes = safetensors::serialize(views, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(parent) = path.as_ref().parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read<P: AsRef<Path>>(path: P) -> Result<(CheckpointMeta, BTreeMap<String, Array2<f64>>)> {
    let buffer = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&buffer).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint("missing metadata record".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(meta_json)?;
    let st = SafeTensors::deserialize(&buffer).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 || view.shape().len() != 2 {
            return Err(Error::Checkpoint(format!("tensor `{name}` is not a 2-D f64 tensor")));
        }
        let values: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let shape = (view.shape()[0], view.shape()[1]);
        let arr = Array2::from_shape_vec(shape, values).map_err(|e| Error::Checkpoint(e.to_string()))?;
        tensors.insert(name, arr);
    }
    Ok((meta, tensors))
}

/// Copies named tensors into `model`. Every parameter must be present with a
/// matching shape; extra tensors are ignored only when `allow_extra` is set.
pub fn load_into(model: &mut dyn Module, tensors: &BTreeMap<String, Array2<f64>>, allow_extra: bool) -> Result<()> {
    let mut problem: Option<String> = None;
    let mut used = 0usize;
    model.visit_mut("", &mut |name, p| {
        if problem.is_some() {
            return;
        }
        match tensors.get(name) {
            None => problem = Some(format!("missing tensor `{name}`")),
            Some(t) if t.dim() != p.value.dim() => {
                problem = Some(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.dim(),
                    p.value.dim()
                ))
            }
            Some(t) => {
                p.value.assign(t);
                used += 1;
            }
        }
    });
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }
    if !allow_extra && used != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model uses {used}",
            tensors.len()
        )));
    }
    Ok(())
}

/// A model restored from disk.
#[derive(Clone, Debug)]
pub enum LoadedModel {
    Pretrain(MaskedAutoencoder),
    Finetune(VitClassifier),
}

impl LoadedModel {
    pub fn as_classifier(&self) -> &dyn ImageClassifier {
        match self {
            LoadedModel::Pretrain(m) => m,
            LoadedModel::Finetune(m) => m,
        }
    }
}

pub fn load<P: AsRef<Path>>(path: P) -> Result<(CheckpointMeta, LoadedModel)> {
    let (meta, tensors) = read(path)?;
    let model = match meta.kind {
        ModelKind::Pretrain => {
            let mut m = MaskedAutoencoder::new(meta.config.clone(), meta.seed)?;
            load_into(&mut m, &tensors, false)?;
            LoadedModel::Pretrain(m)
        }
        ModelKind::Finetune => {
            let mut m = VitClassifier::new(meta.config.clone(), meta.global_pool, meta.seed)?;
            if meta.head != m.head.kind() {
                let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(meta.seed);
                m.head = ClassHead::build(meta.head, meta.config.embed_dim, meta.config.num_classes, &mut rng);
            }
            load_into(&mut m, &tensors, false)?;
            LoadedModel::Finetune(m)
        }
    };
    Ok((meta, model))
}
