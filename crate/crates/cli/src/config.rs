//! Flat TOML run configuration. Every key is optional; unset keys take the
//! phase defaults. The resolved configuration is written back into the run
//! directory with every key filled in.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use samlab_core::data::{generate_synthetic_lesion_dataset, load_image_folder, synthetic::load_dataset_dir, Dataset};
use samlab_core::masking::{MaskingRatios, MaskingStrategy, SamplingMode};
use samlab_core::model::PatchConfig;
use samlab_core::training::{LossConfig, ReconLossKind, TrainRunConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// `desk` or `vit_base`; the individual dimension keys override it.
    pub model: Option<String>,
    pub image_size: Option<usize>,
    pub patch_size: Option<usize>,
    pub embed_dim: Option<usize>,
    pub depth: Option<usize>,
    pub num_heads: Option<usize>,
    pub decoder_dim: Option<usize>,
    pub decoder_depth: Option<usize>,
    pub decoder_heads: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub num_classes: Option<usize>,

    /// `synth:<n>`, `folder:<path>` or `dir:<path>` (a saved synthetic set).
    pub dataset: Option<String>,
    pub data_seed: Option<u64>,
    pub train_fraction: Option<f64>,
    pub split_seed: Option<u64>,

    pub epochs: Option<usize>,
    pub warmup_epochs: Option<usize>,
    pub base_lr: Option<f64>,
    pub min_lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub batch_size: Option<usize>,
    pub mask_ratio: Option<f64>,
    pub throw_ratio: Option<f64>,
    pub update_interval: Option<usize>,
    pub layer_decay: Option<f64>,
    pub global_pool: Option<bool>,
    pub seed: Option<u64>,
    pub sampling: Option<SamplingMode>,
    pub lambda: Option<f64>,
    pub norm_pix_loss: Option<bool>,
    pub recon_loss: Option<ReconLossKind>,
    pub strategy: Option<MaskingStrategy>,
    pub use_sam: Option<bool>,
    pub reuse_head: Option<bool>,
    pub augment: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Synthetic { n: usize },
    Folder(PathBuf),
    Dir(PathBuf),
}

impl DatasetSource {
    pub fn parse(uri: &str) -> anyhow::Result<Self> {
        match uri.split_once(':') {
            Some(("synth", n)) => Ok(Self::Synthetic {
                n: n.parse().with_context(|| format!("dataset: `{n}` is not a sample count"))?,
            }),
            Some(("folder", p)) if !p.is_empty() => Ok(Self::Folder(p.into())),
            Some(("dir", p)) if !p.is_empty() => Ok(Self::Dir(p.into())),
            _ => bail!("dataset: `{uri}` is not one of synth:<n>, folder:<path>, dir:<path>"),
        }
    }
}

/// Everything a command needs, fully resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub phase: Phase,
    pub model: PatchConfig,
    pub train: TrainRunConfig,
    pub dataset: String,
    pub data_seed: u64,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub preset: String,
}

fn preset(name: &str, classes: usize) -> anyhow::Result<PatchConfig> {
    match name {
        "desk" => Ok(PatchConfig::desk(classes)),
        "vit_base" => Ok(PatchConfig::vit_base(classes)),
        other => bail!("model: unknown preset `{other}` (expected desk or vit_base)"),
    }
}

impl Settings {
    pub fn from_toml_str(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).context("invalid configuration")
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml_str(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Applies `key=value` overrides. Values are parsed as TOML, falling back
    /// to a plain string.
    pub fn with_overrides(self, pairs: &[String]) -> anyhow::Result<Self> {
        let mut table = toml::Table::try_from(&self).context("serializing configuration")?;
        for pair in pairs {
            let (key, raw) = pair
                .split_once('=')
                .with_context(|| format!("override `{pair}` is not key=value"))?;
            let key = key.trim().replace('-', "_");
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key, value);
        }
        toml::Value::Table(table)
            .try_into()
            .context("invalid configuration override")
    }

    pub fn resolve(&self, phase: Phase) -> anyhow::Result<Resolved> {
        let preset_name = self.model.clone().unwrap_or_else(|| "desk".into());
        let mut m = preset(&preset_name, self.num_classes.unwrap_or(4))?;
        if let Some(s) = self.image_size {
            m.image_height = s;
            m.image_width = s;
        }
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = self.$field { m.$target = v; })*
            };
        }
        set!(patch_size => patch_size, embed_dim => embed_dim, depth => encoder_depth, num_heads => num_heads,
             decoder_dim => decoder_dim, decoder_depth => decoder_depth, decoder_heads => decoder_heads,
             mlp_ratio => mlp_ratio);
        m.validate()?;

        let base = match phase {
            Phase::Pretrain => TrainRunConfig::pretrain_default(),
            Phase::Finetune => TrainRunConfig::finetune_default(),
        };
        let ratios = MaskingRatios {
            mask_ratio: self.mask_ratio.unwrap_or(base.ratios.mask_ratio),
            throw_ratio: self.throw_ratio.unwrap_or(base.ratios.throw_ratio),
        };
        let train = TrainRunConfig {
            epochs: self.epochs.unwrap_or(base.epochs),
            warmup_epochs: self.warmup_epochs.unwrap_or(base.warmup_epochs),
            base_lr: self.base_lr.unwrap_or(base.base_lr),
            min_lr: self.min_lr.unwrap_or(base.min_lr),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            beta1: self.beta1.unwrap_or(base.beta1),
            beta2: self.beta2.unwrap_or(base.beta2),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            ratios,
            weight_update_interval: self.update_interval.unwrap_or(base.weight_update_interval),
            layerwise_lr_decay: self.layer_decay.unwrap_or(base.layerwise_lr_decay),
            global_pool: self.global_pool.unwrap_or(base.global_pool),
            seed: self.seed.unwrap_or(base.seed),
            sampling: self.sampling.unwrap_or(base.sampling),
            loss: LossConfig {
                lambda_cls: self.lambda.unwrap_or(base.loss.lambda_cls),
                normalize_pixel_targets: self.norm_pix_loss.unwrap_or(base.loss.normalize_pixel_targets),
                recon: self.recon_loss.unwrap_or(base.loss.recon),
            },
            strategy: self.strategy.unwrap_or(base.strategy),
            use_sam: self.use_sam.unwrap_or(base.use_sam),
            reuse_head: self.reuse_head.unwrap_or(base.reuse_head),
            augment: self.augment.unwrap_or(base.augment),
        };
        train.validate()?;
        let dataset = self.dataset.clone().unwrap_or_else(|| "synth:512".into());
        DatasetSource::parse(&dataset)?;
        let train_fraction = self.train_fraction.unwrap_or(0.8);
        if !(0.0..=1.0).contains(&train_fraction) {
            bail!("train_fraction: {train_fraction} is outside [0, 1]");
        }
        Ok(Resolved {
            phase,
            model: m,
            train,
            dataset,
            data_seed: self.data_seed.unwrap_or(0),
            train_fraction,
            split_seed: self.split_seed.unwrap_or(0),
            preset: preset_name,
        })
    }
}

impl Resolved {
    /// Settings with every key filled in; resolving them again gives `self`.
    pub fn snapshot(&self) -> Settings {
        let (m, t) = (&self.model, &self.train);
        Settings {
            model: Some(self.preset.clone()),
            image_size: Some(m.image_height),
            patch_size: Some(m.patch_size),
            embed_dim: Some(m.embed_dim),
            depth: Some(m.encoder_depth),
            num_heads: Some(m.num_heads),
            decoder_dim: Some(m.decoder_dim),
            decoder_depth: Some(m.decoder_depth),
            decoder_heads: Some(m.decoder_heads),
            mlp_ratio: Some(m.mlp_ratio),
            num_classes: Some(m.num_classes),
            dataset: Some(self.dataset.clone()),
            data_seed: Some(self.data_seed),
            train_fraction: Some(self.train_fraction),
            split_seed: Some(self.split_seed),
            epochs: Some(t.epochs),
            warmup_epochs: Some(t.warmup_epochs),
            base_lr: Some(t.base_lr),
            min_lr: Some(t.min_lr),
            weight_decay: Some(t.weight_decay),
            beta1: Some(t.beta1),
            beta2: Some(t.beta2),
            batch_size: Some(t.batch_size),
            mask_ratio: Some(t.ratios.mask_ratio),
            throw_ratio: Some(t.ratios.throw_ratio),
            update_interval: Some(t.weight_update_interval),
            layer_decay: Some(t.layerwise_lr_decay),
            global_pool: Some(t.global_pool),
            seed: Some(t.seed),
            sampling: Some(t.sampling),
            lambda: Some(t.loss.lambda_cls),
            norm_pix_loss: Some(t.loss.normalize_pixel_targets),
            recon_loss: Some(t.loss.recon),
            strategy: Some(t.strategy),
            use_sam: Some(t.use_sam),
            reuse_head: Some(t.reuse_head),
            augment: Some(t.augment),
        }
    }

    /// Loads the dataset and fixes the class count from it. Returns the
    /// `(train, val)` split.
    pub fn load_data(&mut self) -> anyhow::Result<(Dataset, Dataset)> {
        let data = match DatasetSource::parse(&self.dataset)? {
            DatasetSource::Synthetic { n } => {
                if self.model.image_height != self.model.image_width {
                    bail!("image_size: synthetic data needs square images");
                }
                generate_synthetic_lesion_dataset(n, self.model.num_classes, self.model.image_height, self.data_seed)?
            }
            DatasetSource::Folder(p) => load_image_folder(&p, self.model.image_height)?,
            DatasetSource::Dir(p) => load_dataset_dir(&p)?,
        };
        if data.num_classes != self.model.num_classes {
            self.model.num_classes = data.num_classes;
        }
        Ok(data.split(self.train_fraction, self.split_seed)?)
    }
}
