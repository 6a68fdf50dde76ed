//! Python bindings: model configuration, FLOPs accounting, ranked partitions,
//! synthetic lesion data, and small pre-training / fine-tuning runs.

use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use samlab_core::data::{eval_record, generate_synthetic_lesion_dataset, ChannelStats, Dataset as CoreDataset};
use samlab_core::masking::{
    partition as core_partition, pixel_map_to_patch_weights, sample_indices as core_sample_indices, MaskingRatios,
    MaskingStrategy, SamplingMode,
};
use samlab_core::metrics::{count_flops, mask_precision, MacConvention};
use samlab_core::model::checkpoint::{self, CheckpointMeta, ModelKind};
use samlab_core::model::{MaskedAutoencoder as CoreMae, PatchConfig as CoreConfig, VitClassifier};
use samlab_core::training::{self, masking_weights_for, partitions_for_dataset, EvalReport, TrainRunConfig};
use samlab_core::Error;
use serde::Serialize;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Config { .. } | Error::RatioSum { .. } | Error::InvalidLabel { .. } | Error::Shape { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_f64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(f)) => f.into_pyobject(py)?.into_any(),
            _ => py.None().into_bound(py),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn to_dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn parse_mode(mode: &str) -> PyResult<SamplingMode> {
    match mode {
        "stochastic" => Ok(SamplingMode::Stochastic),
        "deterministic" => Ok(SamplingMode::Deterministic),
        other => Err(PyValueError::new_err(format!(
            "unknown sampling mode {other:?} (expected stochastic or deterministic)"
        ))),
    }
}

fn parse_strategy(strategy: &str) -> PyResult<MaskingStrategy> {
    strategy.parse().map_err(|e: Error| PyValueError::new_err(e.to_string()))
}

/// Vision-transformer dimensions.
#[pyclass(module = "samlab", from_py_object)]
#[derive(Clone)]
struct PatchConfig {
    inner: CoreConfig,
}

#[pymethods]
impl PatchConfig {
    #[new]
    #[pyo3(signature = (image_size=64, patch_size=8, embed_dim=48, depth=3, num_heads=3, decoder_dim=32, decoder_depth=1, decoder_heads=2, num_classes=4, mlp_ratio=4))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        image_size: usize,
        patch_size: usize,
        embed_dim: usize,
        depth: usize,
        num_heads: usize,
        decoder_dim: usize,
        decoder_depth: usize,
        decoder_heads: usize,
        num_classes: usize,
        mlp_ratio: usize,
    ) -> PyResult<Self> {
        let inner = CoreConfig {
            image_height: image_size,
            image_width: image_size,
            patch_size,
            embed_dim,
            num_heads,
            encoder_depth: depth,
            decoder_dim,
            decoder_depth,
            decoder_heads,
            num_classes,
            mlp_ratio,
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (num_classes=4))]
    fn desk(num_classes: usize) -> Self {
        Self {
            inner: CoreConfig::desk(num_classes),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (num_classes=1000))]
    fn vit_base(num_classes: usize) -> Self {
        Self {
            inner: CoreConfig::vit_base(num_classes),
        }
    }

    #[getter]
    fn num_patches(&self) -> usize {
        self.inner.num_patches()
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "PatchConfig(image_size={}, patch_size={}, embed_dim={}, depth={}, num_heads={}, num_classes={})",
            c.image_height, c.patch_size, c.embed_dim, c.encoder_depth, c.num_heads, c.num_classes
        )
    }
}

/// Encoder operation counts for a full-token and a partitioned pass.
#[pyfunction]
#[pyo3(signature = (config, mask_ratio=0.45, throw_ratio=0.30, two_op=false))]
fn flops<'py>(
    py: Python<'py>,
    config: &PatchConfig,
    mask_ratio: f64,
    throw_ratio: f64,
    two_op: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let ratios = MaskingRatios::new(mask_ratio, throw_ratio).map_err(to_py)?;
    let conv = if two_op { MacConvention::TwoOp } else { MacConvention::OneOp };
    let n = config.inner.num_patches();
    let full = count_flops(&config.inner, n + 1, conv);
    let part = count_flops(&config.inner, ratios.encoder_tokens(n), conv);
    let d = PyDict::new(py);
    d.set_item("full_tokens", full.token_count)?;
    d.set_item("partitioned_tokens", part.token_count)?;
    d.set_item("full_gflops", full.giga())?;
    d.set_item("partitioned_gflops", part.giga())?;
    d.set_item("flops_reduction_pct", 100.0 * (1.0 - part.total() as f64 / full.total() as f64))?;
    d.set_item(
        "token_reduction_pct",
        100.0 * (1.0 - part.token_count as f64 / full.token_count as f64),
    )?;
    Ok(d.into_any())
}

/// Patch indices ranked by weight, highest first.
#[pyfunction]
#[pyo3(signature = (weights, mode="stochastic", seed=0))]
fn sample_indices(weights: Vec<f64>, mode: &str, seed: u64) -> PyResult<Vec<usize>> {
    Ok(core_sample_indices(&weights, parse_mode(mode)?, seed).order)
}

/// `{"mask": [...], "throw": [...], "vis": [...]}` for one weight vector.
#[pyfunction]
#[pyo3(signature = (weights, mask_ratio=0.45, throw_ratio=0.30, mode="stochastic", seed=0))]
fn partition<'py>(
    py: Python<'py>,
    weights: Vec<f64>,
    mask_ratio: f64,
    throw_ratio: f64,
    mode: &str,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let ratios = MaskingRatios::new(mask_ratio, throw_ratio).map_err(to_py)?;
    let order = core_sample_indices(&weights, parse_mode(mode)?, seed);
    let p = core_partition(&order, &ratios, weights.len()).map_err(to_py)?;
    to_dict(py, &p)
}

/// Labelled images with optional lesion masks.
#[pyclass(module = "samlab", from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: CoreDataset,
}

impl Dataset {
    fn sample(&self, index: usize) -> PyResult<&samlab_core::data::Sample> {
        self.inner
            .samples
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("index {index} out of range {}", self.inner.len())))
    }
}

#[pymethods]
impl Dataset {
    /// Seeded synthetic lesion images, `size × size`.
    #[staticmethod]
    #[pyo3(signature = (n, num_classes=4, size=64, seed=0))]
    fn synthetic(n: usize, num_classes: usize, size: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: generate_synthetic_lesion_dataset(n, num_classes, size, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn image_folder(path: &str, size: usize) -> PyResult<Self> {
        Ok(Self {
            inner: samlab_core::data::load_image_folder(std::path::Path::new(path), size).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names.clone()
    }

    fn image_id(&self, index: usize) -> PyResult<String> {
        Ok(self.sample(index)?.image_id.clone())
    }

    /// Nested `H × W × 3` list of values in `[0, 1]`.
    fn image(&self, index: usize) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let img = &self.sample(index)?.image;
        Ok(img
            .outer_iter()
            .map(|row| row.outer_iter().map(|px| px.to_vec()).collect())
            .collect())
    }

    fn lesion_mask(&self, index: usize) -> PyResult<Option<Vec<Vec<bool>>>> {
        Ok(self.sample(index)?
            .lesion_mask
            .as_ref()
            .map(|m| m.outer_iter().map(|r| r.to_vec()).collect()))
    }

    /// Seeded hash split into `(train, val)`.
    #[pyo3(signature = (train_fraction=0.8, seed=0))]
    fn split(&self, train_fraction: f64, seed: u64) -> PyResult<(Dataset, Dataset)> {
        let (a, b) = self.inner.split(train_fraction, seed).map_err(to_py)?;
        Ok((Dataset { inner: a }, Dataset { inner: b }))
    }
}

#[allow(clippy::too_many_arguments)]
fn run_config(
    base: TrainRunConfig,
    epochs: usize,
    warmup_epochs: Option<usize>,
    batch_size: Option<usize>,
    base_lr: Option<f64>,
    lambda_cls: Option<f64>,
    strategy: Option<&str>,
    mask_ratio: f64,
    throw_ratio: f64,
    update_interval: Option<usize>,
    seed: u64,
    augment: bool,
) -> PyResult<TrainRunConfig> {
    let mut cfg = TrainRunConfig {
        epochs,
        warmup_epochs: warmup_epochs.unwrap_or(epochs.min(base.warmup_epochs)),
        batch_size: batch_size.unwrap_or(base.batch_size),
        base_lr: base_lr.unwrap_or(base.base_lr),
        ratios: MaskingRatios::new(mask_ratio, throw_ratio).map_err(to_py)?,
        weight_update_interval: update_interval.unwrap_or(base.weight_update_interval),
        seed,
        augment,
        ..base
    };
    if let Some(s) = strategy {
        cfg.strategy = parse_strategy(s)?;
    }
    if let Some(l) = lambda_cls {
        cfg.loss.lambda_cls = l;
    }
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

fn eval_dict<'py>(py: Python<'py>, report: &EvalReport) -> PyResult<Bound<'py, PyAny>> {
    to_dict(py, report)
}

/// Encoder, decoder and class-token head trained with the joint loss.
#[pyclass(module = "samlab")]
struct MaskedAutoencoder {
    inner: CoreMae,
    stats: ChannelStats,
}

#[pymethods]
impl MaskedAutoencoder {
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: &PatchConfig, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: CoreMae::new(config.inner.clone(), seed).map_err(to_py)?,
            stats: ChannelStats::identity(),
        })
    }

    #[getter]
    fn config(&self) -> PatchConfig {
        PatchConfig {
            inner: self.inner.cfg.clone(),
        }
    }

    #[getter]
    fn num_params(&self) -> usize {
        samlab_core::model::Module::num_params(&self.inner)
    }

    /// Pre-trains in place and returns the per-epoch metric log.
    #[pyo3(signature = (data, epochs, warmup_epochs=None, batch_size=None, base_lr=None, lambda_cls=None, strategy=None, mask_ratio=0.45, throw_ratio=0.30, update_interval=None, seed=0, augment=true))]
    #[allow(clippy::too_many_arguments)]
    fn pretrain<'py>(
        &mut self,
        py: Python<'py>,
        data: &Dataset,
        epochs: usize,
        warmup_epochs: Option<usize>,
        batch_size: Option<usize>,
        base_lr: Option<f64>,
        lambda_cls: Option<f64>,
        strategy: Option<&str>,
        mask_ratio: f64,
        throw_ratio: f64,
        update_interval: Option<usize>,
        seed: u64,
        augment: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg = run_config(
            TrainRunConfig::pretrain_default(),
            epochs,
            warmup_epochs,
            batch_size,
            base_lr,
            lambda_cls,
            strategy,
            mask_ratio,
            throw_ratio,
            update_interval,
            seed,
            augment,
        )?;
        let report = training::pretrain(&mut self.inner, &data.inner, &cfg, &mut ()).map_err(to_py)?;
        self.stats = report.stats;
        to_dict(py, &report.log)
    }

    /// Normalized class-token attention over the `N` patches of image `index`.
    fn masking_weights(&self, data: &Dataset, index: usize) -> PyResult<Vec<f64>> {
        let s = data.sample(index)?;
        let cfg = &self.inner.cfg;
        let mw = masking_weights_for(&self.inner, s, &self.stats, 0).map_err(to_py)?;
        let rec = eval_record(s.height(), s.width(), cfg.image_height, cfg.image_width);
        pixel_map_to_patch_weights(&mw, &rec, cfg).map_err(to_py)
    }

    /// Lesion mask rate and argmax hit rate of the partitions on `data`.
    #[pyo3(signature = (data, strategy="sam", mask_ratio=0.45, throw_ratio=0.30, mode="stochastic", seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn mask_precision<'py>(
        &self,
        py: Python<'py>,
        data: &Dataset,
        strategy: &str,
        mask_ratio: f64,
        throw_ratio: f64,
        mode: &str,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let ratios = MaskingRatios::new(mask_ratio, throw_ratio).map_err(to_py)?;
        let masks = data
            .inner
            .samples
            .iter()
            .map(|s| s.lesion_mask.clone())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| PyValueError::new_err("dataset has no lesion masks"))?;
        let weights = (0..data.inner.len())
            .map(|i| self.masking_weights(data, i))
            .collect::<PyResult<Vec<_>>>()?;
        let parts = partitions_for_dataset(
            &self.inner,
            &data.inner,
            &self.stats,
            parse_strategy(strategy)?,
            &ratios,
            parse_mode(mode)?,
            seed,
        )
        .map_err(to_py)?;
        let report = mask_precision(&parts, Some(&weights), &masks, &self.inner.cfg).map_err(to_py)?;
        to_dict(py, &report)
    }

    /// Full-token accuracy of the pre-training head.
    fn evaluate<'py>(&self, py: Python<'py>, data: &Dataset) -> PyResult<Bound<'py, PyAny>> {
        eval_dict(py, &training::evaluate(&self.inner, &data.inner, &self.stats).map_err(to_py)?)
    }

    /// A classifier sharing this encoder, with a fresh head unless `reuse_head`.
    #[pyo3(signature = (global_pool=true, reuse_head=false, seed=0))]
    fn to_classifier(&self, global_pool: bool, reuse_head: bool, seed: u64) -> Classifier {
        Classifier {
            inner: VitClassifier::from_pretrained(&self.inner, global_pool, reuse_head, seed),
            stats: self.stats,
        }
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let meta = CheckpointMeta {
            kind: ModelKind::Pretrain,
            config: self.inner.cfg.clone(),
            epoch: 0,
            seed: 0,
            head: self.inner.head.kind(),
            global_pool: false,
            normalization: Some(self.stats),
        };
        checkpoint::save(path, &self.inner, &meta).map_err(to_py)
    }
}

/// Encoder plus `LayerNorm → Linear` head.
#[pyclass(module = "samlab")]
struct Classifier {
    inner: VitClassifier,
    stats: ChannelStats,
}

#[pymethods]
impl Classifier {
    #[new]
    #[pyo3(signature = (config, global_pool=true, seed=0))]
    fn new(config: &PatchConfig, global_pool: bool, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: VitClassifier::new(config.inner.clone(), global_pool, seed).map_err(to_py)?,
            stats: ChannelStats::identity(),
        })
    }

    /// Fine-tunes in place and returns the per-epoch metric log.
    #[pyo3(signature = (data, epochs, val=None, warmup_epochs=None, batch_size=None, base_lr=None, use_sam=true, mask_ratio=0.45, throw_ratio=0.30, update_interval=None, seed=0, augment=true))]
    #[allow(clippy::too_many_arguments)]
    fn finetune<'py>(
        &mut self,
        py: Python<'py>,
        data: &Dataset,
        epochs: usize,
        val: Option<&Dataset>,
        warmup_epochs: Option<usize>,
        batch_size: Option<usize>,
        base_lr: Option<f64>,
        use_sam: bool,
        mask_ratio: f64,
        throw_ratio: f64,
        update_interval: Option<usize>,
        seed: u64,
        augment: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let mut cfg = run_config(
            TrainRunConfig::finetune_default(),
            epochs,
            warmup_epochs,
            batch_size,
            base_lr,
            None,
            None,
            mask_ratio,
            throw_ratio,
            update_interval,
            seed,
            augment,
        )?;
        cfg.use_sam = use_sam;
        let report = training::finetune(&mut self.inner, &data.inner, val.map(|v| &v.inner), &cfg, &mut ())
            .map_err(to_py)?;
        self.stats = report.stats;
        to_dict(py, &report.log)
    }

    /// Full-token (`N + 1`) evaluation.
    fn evaluate<'py>(&self, py: Python<'py>, data: &Dataset) -> PyResult<Bound<'py, PyAny>> {
        eval_dict(py, &training::evaluate(&self.inner, &data.inner, &self.stats).map_err(to_py)?)
    }
}

#[pymodule]
fn samlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PatchConfig>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<MaskedAutoencoder>()?;
    m.add_class::<Classifier>()?;
    m.add_function(wrap_pyfunction!(flops, m)?)?;
    m.add_function(wrap_pyfunction!(sample_indices, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    Ok(())
}
