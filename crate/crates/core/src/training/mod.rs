//! Pre-training with the joint reconstruction + classification loss,
//! fine-tuning on the same partitions, and full-token evaluation.

pub mod config;
pub mod loss;
pub mod optim;

use std::time::Instant;

use ndarray::{s, Array2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::TrainRunConfig;
pub use loss::{
    cls_loss, cross_entropy_logits, normalize_target_patches, recon_loss, total_loss, LossConfig, ReconLossKind,
};
pub use optim::{cosine_lr, layer_id, layer_scale, AdamW, AdamWConfig};

use crate::data::{apply_record, eval_record, sample_record, AugmentPolicy, AugmentationRecord, ChannelStats, Dataset, Sample};
use crate::error::{Error, Result};
use crate::imageops::resize_plane;
use crate::masking::{
    extract_masking_weights, partition, pixel_map_to_patch_weights, random_partition_with_rng,
    sample_indices_with_rng, weights_to_pixel_map, MaskingRatios, MaskingStrategy, MaskingWeights, SamplingMode,
    TokenPartition, WeightCache,
};
use crate::model::{patchify_image, ImageClassifier, MaskedAutoencoder, Module, PatchConfig, VitClassifier};

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_con: f64,
    pub l_cls: f64,
    pub l_total: f64,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
    /// Tokens per sample entering the encoder, class token included.
    pub encoder_tokens: usize,
    pub weights_refreshed: bool,
    pub wall_time_s: f64,
}

/// Callbacks for persisting progress. Every method defaults to a no-op.
pub trait TrainObserver {
    fn epoch_end(&mut self, _metrics: &EpochMetrics) -> Result<()> {
        Ok(())
    }

    /// Called after every weight-update interval and after the last epoch.
    /// `epoch` counts completed epochs.
    fn checkpoint(&mut self, _epoch: usize, _model: &dyn Module) -> Result<()> {
        Ok(())
    }

    fn weights_refreshed(&mut self, _epoch: usize, _cache: &WeightCache) -> Result<()> {
        Ok(())
    }

    /// The run is about to abort with `error`.
    fn diverged(&mut self, _error: &Error) {}
}

impl TrainObserver for () {}

pub struct PretrainReport {
    pub log: Vec<EpochMetrics>,
    pub stats: ChannelStats,
    pub cache: WeightCache,
}

pub struct FinetuneReport {
    pub log: Vec<EpochMetrics>,
    pub stats: ChannelStats,
    pub cache: WeightCache,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub top1: f64,
    /// Mean of per-class accuracies over classes present in the data.
    pub mean_per_class: f64,
    pub per_class: Vec<Option<f64>>,
    pub class_names: Vec<String>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Crop/flip/resize, normalize and patchify one canonical image.
pub fn prepare_patches(
    image: ArrayView3<f64>,
    record: &AugmentationRecord,
    stats: &ChannelStats,
    patch_size: usize,
) -> Result<Array2<f64>> {
    let warped = apply_record(image, record);
    patchify_image(stats.normalize(warped.view()).view(), patch_size)
}

fn sample_eval_record(sample: &Sample, cfg: &PatchConfig) -> AugmentationRecord {
    eval_record(sample.height(), sample.width(), cfg.image_height, cfg.image_width)
}

/// Patch weights mapped back onto the canonical image: the evaluation crop
/// receives the upsampled map, anything outside it stays 0.
fn canonical_pixel_map(
    patch_weights: &[f64],
    cfg: &PatchConfig,
    record: &AugmentationRecord,
    height: usize,
    width: usize,
    epoch: usize,
    image_id: &str,
) -> Result<MaskingWeights> {
    let c = record.crop_box;
    if c.x == 0 && c.y == 0 && c.width == width && c.height == height {
        return weights_to_pixel_map(patch_weights, cfg, height, width, epoch, image_id);
    }
    let inner = weights_to_pixel_map(patch_weights, cfg, cfg.grid_height(), cfg.grid_width(), epoch, image_id)?;
    let resized = resize_plane(inner.pixel_map.view(), c.height, c.width);
    let mut pixel_map = Array2::zeros((height, width));
    pixel_map
        .slice_mut(s![c.y..c.y + c.height, c.x..c.x + c.width])
        .assign(&resized);
    Ok(MaskingWeights {
        pixel_map,
        source_epoch: epoch,
        image_id: image_id.to_string(),
    })
}

/// Class-token attention weights of one sample from a full-token pass under
/// the evaluation transform.
pub fn masking_weights_for(
    model: &dyn ImageClassifier,
    sample: &Sample,
    stats: &ChannelStats,
    epoch: usize,
) -> Result<MaskingWeights> {
    let cfg = model.config();
    let record = sample_eval_record(sample, cfg);
    let patches = prepare_patches(sample.image.view(), &record, stats, cfg.patch_size)?;
    let out = model.encoder().encode_full(&patches)?;
    let attn = out.last_attention.ok_or_else(|| Error::Config {
        field: "encoder_depth".into(),
        reason: "attention-driven masking needs at least one encoder block".into(),
    })?;
    let w = extract_masking_weights(&attn, cfg.num_patches())?;
    canonical_pixel_map(&w, cfg, &record, sample.height(), sample.width(), epoch, &sample.image_id)
}

/// Recomputes the weight map of every image in `data`.
pub fn update_masking_weights(
    model: &dyn ImageClassifier,
    data: &Dataset,
    stats: &ChannelStats,
    epoch: usize,
) -> Result<Vec<MaskingWeights>> {
    data.samples
        .iter()
        .map(|s| masking_weights_for(model, s, stats, epoch))
        .collect()
}

/// Ranks the patches of one augmented view by its cached weights and splits them.
pub fn sam_partition<R: Rng + ?Sized>(
    cache: &WeightCache,
    image_id: &str,
    record: &AugmentationRecord,
    cfg: &PatchConfig,
    ratios: &MaskingRatios,
    mode: SamplingMode,
    rng: &mut R,
) -> Result<TokenPartition> {
    let w = cache.with(image_id, |mw| pixel_map_to_patch_weights(mw, record, cfg))??;
    let order = sample_indices_with_rng(&w, mode, rng);
    partition(&order, ratios, cfg.num_patches())
}

/// Partitions of every image under the evaluation transform, from freshly
/// computed weights (or uniformly random when `strategy` is random).
pub fn partitions_for_dataset(
    model: &dyn ImageClassifier,
    data: &Dataset,
    stats: &ChannelStats,
    strategy: MaskingStrategy,
    ratios: &MaskingRatios,
    mode: SamplingMode,
    seed: u64,
) -> Result<Vec<TokenPartition>> {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.samples
        .iter()
        .map(|s| {
            if !strategy.uses_attention() {
                return random_partition_with_rng(cfg.num_patches(), ratios, &mut rng);
            }
            let mw = masking_weights_for(model, s, stats, 0)?;
            let w = pixel_map_to_patch_weights(&mw, &sample_eval_record(s, cfg), cfg)?;
            partition(&sample_indices_with_rng(&w, mode, &mut rng), ratios, cfg.num_patches())
        })
        .collect()
}

fn check_classes(model_classes: usize, data: &Dataset) -> Result<()> {
    if data.num_classes != model_classes {
        return Err(Error::Config {
            field: "num_classes".into(),
            reason: format!("model has {model_classes} classes, dataset has {}", data.num_classes),
        });
    }
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    Ok(())
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn policy(cfg: &TrainRunConfig) -> Option<AugmentPolicy> {
    cfg.augment.then(AugmentPolicy::train_default)
}

fn train_record<R: Rng + ?Sized>(
    sample: &Sample,
    policy: &Option<AugmentPolicy>,
    cfg: &PatchConfig,
    rng: &mut R,
) -> AugmentationRecord {
    match policy {
        Some(p) => sample_record(sample.height(), sample.width(), p, cfg.image_height, cfg.image_width, rng),
        None => sample_eval_record(sample, cfg),
    }
}

#[derive(Default)]
struct Tally {
    l_con: f64,
    l_cls: f64,
    correct: usize,
    seen: usize,
    tokens: usize,
}

impl Tally {
    fn mean(&self, v: f64) -> f64 {
        if self.seen == 0 {
            0.0
        } else {
            v / self.seen as f64
        }
    }
}

fn non_finite(observer: &mut dyn TrainObserver, epoch: usize, step: usize, l_con: f64, l_cls: f64) -> Error {
    let err = Error::NonFiniteLoss {
        epoch,
        step,
        l_con,
        l_cls,
    };
    observer.diverged(&err);
    err
}

/// Pre-trains `model` on `train`.
///
/// Epochs before `warmup_epochs` (and every epoch of the random strategy)
/// use uniformly random partitions. Attention strategies refresh the weight
/// cache at the end of warmup and every `weight_update_interval` epochs after
/// it. The `amt` strategy trains with λ = 0 whatever `cfg.loss` says.
pub fn pretrain(
    model: &mut MaskedAutoencoder,
    train: &Dataset,
    cfg: &TrainRunConfig,
    observer: &mut dyn TrainObserver,
) -> Result<PretrainReport> {
    cfg.validate()?;
    check_classes(model.cfg.num_classes, train)?;
    let pcfg = model.cfg.clone();
    let n = pcfg.num_patches();
    let stats = train.channel_stats();
    let cache = WeightCache::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.adamw());
    let lambda = match cfg.strategy {
        MaskingStrategy::Amt => 0.0,
        _ => cfg.loss.lambda_cls,
    };
    let policy = policy(cfg);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let attention_phase = cfg.strategy.uses_attention() && epoch >= cfg.warmup_epochs;
        let refresh = attention_phase && (epoch - cfg.warmup_epochs).is_multiple_of(cfg.weight_update_interval);
        if refresh {
            cache.replace_all(update_masking_weights(&*model, train, &stats, epoch)?);
            observer.weights_refreshed(epoch, &cache)?;
        }
        order.shuffle(&mut rng);
        let mut tally = Tally::default();
        let mut first_lr = None;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let lr = cosine_lr(
                epoch as f64 + step as f64 / steps_per_epoch as f64,
                cfg.warmup_epochs,
                cfg.epochs,
                cfg.base_lr,
                cfg.min_lr,
            );
            first_lr.get_or_insert(lr);
            model.zero_grad();
            let inv_b = 1.0 / batch.len() as f64;
            let (mut b_con, mut b_cls) = (0.0, 0.0);
            for &idx in batch {
                let sample = &train.samples[idx];
                let record = train_record(sample, &policy, &pcfg, &mut rng);
                let patches = prepare_patches(sample.image.view(), &record, &stats, pcfg.patch_size)?;
                let part = if attention_phase {
                    sam_partition(&cache, &sample.image_id, &record, &pcfg, &cfg.ratios, cfg.sampling, &mut rng)?
                } else {
                    random_partition_with_rng(n, &cfg.ratios, &mut rng)?
                };
                let (fwd, mcache) = model.forward_masked(&patches, &part.vis, &part.mask)?;
                let raw = patches.select(Axis(0), &part.mask);
                let target = if cfg.loss.normalize_pixel_targets {
                    normalize_target_patches(raw.view())
                } else {
                    raw
                };
                let (l_con, d_pred) = recon_loss(&fwd.prediction.predicted_pixels, &target, cfg.loss.recon)?;
                let (l_cls, d_logits) = cross_entropy_logits(&fwd.logits, sample.label)?;
                if !l_con.is_finite() || !l_cls.is_finite() {
                    return Err(non_finite(observer, epoch, step, l_con, l_cls));
                }
                let d_logits: Vec<f64> = d_logits.iter().map(|g| g * lambda * inv_b).collect();
                model.backward_masked(mcache, &(d_pred * inv_b), &d_logits);
                b_con += l_con;
                b_cls += l_cls;
                tally.correct += usize::from(argmax(&fwd.logits) == sample.label);
                tally.tokens = tally.tokens.max(fwd.encoder_tokens);
            }
            tally.l_con += b_con;
            tally.l_cls += b_cls;
            tally.seen += batch.len();
            opt.step(model, lr, &|_| 1.0);
        }
        let l_con = tally.mean(tally.l_con);
        let l_cls = tally.mean(tally.l_cls);
        let metrics = EpochMetrics {
            epoch,
            l_con,
            l_cls,
            l_total: l_con + lambda * l_cls,
            lr: first_lr.unwrap_or(0.0),
            train_acc: Some(tally.mean(tally.correct as f64)),
            val_acc: None,
            encoder_tokens: tally.tokens,
            weights_refreshed: refresh,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        observer.epoch_end(&metrics)?;
        log.push(metrics);
        let done = epoch + 1;
        if done % cfg.weight_update_interval == 0 || done == cfg.epochs {
            observer.checkpoint(done, &*model)?;
        }
    }
    Ok(PretrainReport { log, stats, cache })
}

/// Fine-tunes `model` with cross-entropy only. With `use_sam` the weight
/// cache is filled before the first epoch and refreshed every
/// `weight_update_interval` epochs, and every step encodes only the visible
/// tokens of a weighted partition; otherwise all tokens are used.
pub fn finetune(
    model: &mut VitClassifier,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainRunConfig,
    observer: &mut dyn TrainObserver,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    check_classes(model.cfg.num_classes, train)?;
    let pcfg = model.cfg.clone();
    let n = pcfg.num_patches();
    let depth = pcfg.encoder_depth;
    let stats = train.channel_stats();
    let cache = WeightCache::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.adamw());
    let decay = cfg.layerwise_lr_decay;
    let scale = move |name: &str| layer_scale(name, depth, decay);
    let policy = policy(cfg);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let all: Vec<usize> = (0..n).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let refresh = cfg.use_sam && epoch % cfg.weight_update_interval == 0;
        if refresh {
            cache.replace_all(update_masking_weights(&*model, train, &stats, epoch)?);
            observer.weights_refreshed(epoch, &cache)?;
        }
        order.shuffle(&mut rng);
        let mut tally = Tally::default();
        let mut first_lr = None;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let lr = cosine_lr(
                epoch as f64 + step as f64 / steps_per_epoch as f64,
                cfg.warmup_epochs,
                cfg.epochs,
                cfg.base_lr,
                cfg.min_lr,
            );
            first_lr.get_or_insert(lr);
            model.zero_grad();
            let inv_b = 1.0 / batch.len() as f64;
            let mut b_cls = 0.0;
            for &idx in batch {
                let sample = &train.samples[idx];
                let record = train_record(sample, &policy, &pcfg, &mut rng);
                let patches = prepare_patches(sample.image.view(), &record, &stats, pcfg.patch_size)?;
                let part;
                let visible: &[usize] = if cfg.use_sam {
                    part = sam_partition(&cache, &sample.image_id, &record, &pcfg, &cfg.ratios, cfg.sampling, &mut rng)?;
                    &part.vis
                } else {
                    &all
                };
                let (logits, tokens, ccache) = model.forward_masked(&patches, visible)?;
                let (l_cls, d_logits) = cross_entropy_logits(&logits, sample.label)?;
                if !l_cls.is_finite() {
                    return Err(non_finite(observer, epoch, step, 0.0, l_cls));
                }
                let d_logits: Vec<f64> = d_logits.iter().map(|g| g * inv_b).collect();
                model.backward_masked(ccache, &d_logits);
                b_cls += l_cls;
                tally.correct += usize::from(argmax(&logits) == sample.label);
                tally.tokens = tally.tokens.max(tokens);
            }
            tally.l_cls += b_cls;
            tally.seen += batch.len();
            opt.step(model, lr, &scale);
        }
        let l_cls = tally.mean(tally.l_cls);
        let val_acc = match val {
            Some(v) if !v.is_empty() => Some(evaluate(&*model, v, &stats)?.top1),
            _ => None,
        };
        let metrics = EpochMetrics {
            epoch,
            l_con: 0.0,
            l_cls,
            l_total: l_cls,
            lr: first_lr.unwrap_or(0.0),
            train_acc: Some(tally.mean(tally.correct as f64)),
            val_acc,
            encoder_tokens: tally.tokens,
            weights_refreshed: refresh,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        observer.epoch_end(&metrics)?;
        log.push(metrics);
        let done = epoch + 1;
        if done % cfg.weight_update_interval == 0 || done == cfg.epochs {
            observer.checkpoint(done, &*model)?;
        }
    }
    Ok(FinetuneReport { log, stats, cache })
}

/// Full-token evaluation under the evaluation transform. No masking.
pub fn evaluate(model: &dyn ImageClassifier, data: &Dataset, stats: &ChannelStats) -> Result<EvalReport> {
    let cfg = model.config();
    let k = cfg.num_classes;
    let mut confusion = vec![vec![0usize; k]; k];
    for s in &data.samples {
        if s.label >= k {
            return Err(Error::InvalidLabel {
                label: s.label,
                num_classes: k,
            });
        }
        let patches = prepare_patches(s.image.view(), &sample_eval_record(s, cfg), stats, cfg.patch_size)?;
        let pred = argmax(&model.predict_logits(&patches)?);
        confusion[s.label][pred] += 1;
    }
    let total = data.len();
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class: Vec<Option<f64>> = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(EvalReport {
        num_samples: total,
        top1: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        mean_per_class: if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        },
        per_class,
        class_names: data.class_names.clone(),
        confusion,
    })
}
