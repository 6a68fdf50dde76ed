//! Command implementations behind the `samlab` binary.

pub mod config;
pub mod run;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use samlab_core::data::{
    apply_record, apply_record_mask, eval_record, synthetic::save_dataset_dir, ChannelStats, Dataset,
};
use samlab_core::imageops::crop_resize_plane;
use samlab_core::masking::{
    partition, pixel_map_to_patch_weights, random_partition_with_rng, sample_indices_with_rng, write_mask_dump,
    MaskingRatios, MaskingWeights, SamplingMode, TokenPartition,
};
use samlab_core::metrics::{count_flops, export_overlays, mask_precision, FlopsReport, MacConvention, MaskPrecisionReport};
use samlab_core::model::checkpoint::{self, LoadedModel, ModelKind};
use samlab_core::model::{HeadKind, ImageClassifier, MaskedAutoencoder, PatchConfig, VitClassifier};
use samlab_core::training::{self, masking_weights_for, EvalReport, EpochMetrics};
use serde::{Deserialize, Serialize};

use config::{Phase, Resolved, Settings};
use run::{RunDirectory, RunRecorder};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub final_epoch: Option<EpochMetrics>,
    pub train_size: usize,
    pub val_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_eval: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_precision: Option<MaskPrecisionReport>,
}

fn run_name(prefix: &str, r: &Resolved) -> String {
    format!("{prefix}-{}-s{}", r.train.strategy.as_str(), r.train.seed)
}

fn lesion_masks_at_model_res(data: &Dataset, cfg: &PatchConfig) -> Option<Vec<ndarray::Array2<bool>>> {
    data.samples
        .iter()
        .map(|s| {
            s.lesion_mask.as_ref().map(|m| {
                let rec = eval_record(s.height(), s.width(), cfg.image_height, cfg.image_width);
                apply_record_mask(m.view(), &rec)
            })
        })
        .collect()
}

/// Weights and partitions of `data` under the evaluation transform, at model resolution.
fn eval_partitions(
    model: &dyn ImageClassifier,
    data: &Dataset,
    stats: &ChannelStats,
    ratios: &MaskingRatios,
    mode: SamplingMode,
    attention: bool,
    seed: u64,
    epoch: usize,
) -> anyhow::Result<Vec<(MaskingWeights, Vec<f64>, TokenPartition)>> {
    let cfg = model.config();
    let n = cfg.num_patches();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.samples
        .iter()
        .map(|s| {
            let rec = eval_record(s.height(), s.width(), cfg.image_height, cfg.image_width);
            let mw = masking_weights_for(model, s, stats, epoch)?;
            let w = pixel_map_to_patch_weights(&mw, &rec, cfg)?;
            let part = if attention {
                partition(&sample_indices_with_rng(&w, mode, &mut rng), ratios, n)?
            } else {
                random_partition_with_rng(n, ratios, &mut rng)?
            };
            let local = MaskingWeights {
                pixel_map: crop_resize_plane(mw.pixel_map.view(), rec.crop_box, cfg.image_height, cfg.image_width, false),
                ..mw
            };
            Ok((local, w, part))
        })
        .collect()
}

fn precision_on(
    model: &dyn ImageClassifier,
    data: &Dataset,
    stats: &ChannelStats,
    r: &Resolved,
) -> anyhow::Result<Option<MaskPrecisionReport>> {
    let Some(masks) = lesion_masks_at_model_res(data, model.config()) else {
        return Ok(None);
    };
    if data.is_empty() || model.config().encoder_depth == 0 {
        return Ok(None);
    }
    let rows = eval_partitions(
        model,
        data,
        stats,
        &r.train.ratios,
        r.train.sampling,
        r.train.strategy.uses_attention(),
        r.train.seed,
        0,
    )?;
    let parts: Vec<_> = rows.iter().map(|(_, _, p)| p.clone()).collect();
    let weights: Vec<_> = rows.into_iter().map(|(_, w, _)| w).collect();
    Ok(Some(mask_precision(&parts, Some(&weights), &masks, model.config())?))
}

pub fn cmd_pretrain(settings: &Settings, out: Option<&Path>, quiet: bool) -> anyhow::Result<TrainSummary> {
    let mut r = settings.resolve(Phase::Pretrain)?;
    let (train, val) = r.load_data()?;
    let run = RunDirectory::create(out, &run_name("pretrain", &r))?;
    run.write_config(&r)?;
    let mut model = MaskedAutoencoder::new(r.model.clone(), r.train.seed)?;
    let mut rec = RunRecorder::new(
        &run,
        ModelKind::Pretrain,
        r.model.clone(),
        r.train.seed,
        HeadKind::Mlp,
        false,
        train.channel_stats(),
    )?;
    rec.quiet = quiet;
    let report = training::pretrain(&mut model, &train, &r.train, &mut rec).context("pre-training failed")?;
    let precision = precision_on(&model, &val, &report.stats, &r)?;
    let summary = TrainSummary {
        run_dir: run.path.clone(),
        final_epoch: report.log.last().cloned(),
        train_size: train.len(),
        val_size: val.len(),
        val_eval: None,
        mask_precision: precision,
    };
    run.write_report("pretrain_summary.json", &summary)?;
    Ok(summary)
}

fn check_dims(ckpt: &PatchConfig, cfg: &PatchConfig) -> anyhow::Result<()> {
    let fields = [
        ("image_size", ckpt.image_height, cfg.image_height),
        ("patch_size", ckpt.patch_size, cfg.patch_size),
        ("embed_dim", ckpt.embed_dim, cfg.embed_dim),
        ("depth", ckpt.encoder_depth, cfg.encoder_depth),
        ("num_heads", ckpt.num_heads, cfg.num_heads),
        ("mlp_ratio", ckpt.mlp_ratio, cfg.mlp_ratio),
        ("num_classes", ckpt.num_classes, cfg.num_classes),
    ];
    let bad: Vec<String> = fields
        .iter()
        .filter(|(_, a, b)| a != b)
        .map(|(name, a, b)| format!("{name}: checkpoint {a}, config {b}"))
        .collect();
    if !bad.is_empty() {
        bail!("checkpoint/config dimension mismatch ({})", bad.join("; "));
    }
    Ok(())
}

/// Fine-tunes from a pre-training (or fine-tuning) checkpoint, or from
/// scratch when `checkpoint` is `None`.
pub fn cmd_finetune(
    settings: &Settings,
    checkpoint_path: Option<&Path>,
    out: Option<&Path>,
    quiet: bool,
) -> anyhow::Result<TrainSummary> {
    let mut r = settings.resolve(Phase::Finetune)?;
    let (train, val) = r.load_data()?;
    let t = &r.train;
    let mut model = match checkpoint_path {
        Some(p) => {
            let (meta, loaded) =
                checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            check_dims(&meta.config, &r.model)?;
            match loaded {
                LoadedModel::Pretrain(mae) => VitClassifier::from_pretrained(&mae, t.global_pool, t.reuse_head, t.seed),
                LoadedModel::Finetune(mut clf) => {
                    clf.global_pool = t.global_pool;
                    clf
                }
            }
        }
        None => VitClassifier::new(r.model.clone(), t.global_pool, t.seed)?,
    };
    let name = if t.use_sam {
        format!("finetune-sam-s{}", t.seed)
    } else {
        format!("finetune-full-s{}", t.seed)
    };
    let run = RunDirectory::create(out, &name)?;
    run.write_config(&r)?;
    let mut rec = RunRecorder::new(
        &run,
        ModelKind::Finetune,
        r.model.clone(),
        t.seed,
        model.head.kind(),
        t.global_pool,
        train.channel_stats(),
    )?;
    rec.quiet = quiet;
    let val_ref = (!val.is_empty()).then_some(&val);
    let report = training::finetune(&mut model, &train, val_ref, &r.train, &mut rec).context("fine-tuning failed")?;
    let val_eval = match val_ref {
        Some(v) => Some(training::evaluate(&model, v, &report.stats)?),
        None => None,
    };
    if let Some(e) = &val_eval {
        run.write_report("eval_val.json", e)?;
    }
    let summary = TrainSummary {
        run_dir: run.path.clone(),
        final_epoch: report.log.last().cloned(),
        train_size: train.len(),
        val_size: val.len(),
        val_eval,
        mask_precision: None,
    };
    run.write_report("finetune_summary.json", &summary)?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Val,
    All,
}

impl Split {
    fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::All => "all",
        }
    }
}

struct OpenedRun {
    run: RunDirectory,
    resolved: Resolved,
    train: Dataset,
    val: Dataset,
    model: LoadedModel,
    stats: ChannelStats,
    epoch: usize,
}

fn open_run(dir: &Path) -> anyhow::Result<OpenedRun> {
    let run = RunDirectory::open(dir)?;
    let mut resolved = run.read_settings()?.resolve(run.phase()?)?;
    let (train, val) = resolved.load_data()?;
    let ckpt = run.checkpoint_path(None);
    if !ckpt.is_file() {
        bail!("missing checkpoint: {} has no {}", dir.display(), run::LAST_CHECKPOINT);
    }
    let (meta, model) = checkpoint::load(&ckpt)?;
    let stats = meta.normalization.unwrap_or_else(|| train.channel_stats());
    Ok(OpenedRun {
        run,
        resolved,
        train,
        val,
        model,
        stats,
        epoch: meta.epoch,
    })
}

fn select(split: Split, train: &Dataset, val: &Dataset) -> Dataset {
    match split {
        Split::Train => train.clone(),
        Split::Val => val.clone(),
        Split::All => Dataset {
            samples: train.samples.iter().chain(&val.samples).cloned().collect(),
            num_classes: train.num_classes,
            class_names: train.class_names.clone(),
        },
    }
}

/// Full-token evaluation of the run's last checkpoint.
pub fn cmd_eval(dir: &Path, split: Split) -> anyhow::Result<(EvalReport, PathBuf)> {
    let o = open_run(dir)?;
    let data = select(split, &o.train, &o.val);
    let report = training::evaluate(o.model.as_classifier(), &data, &o.stats)?;
    let path = o.run.write_report(&format!("eval_{}.json", split.as_str()), &report)?;
    Ok((report, path))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskDumpSummary {
    pub images: Vec<String>,
    pub overlay_files: Vec<PathBuf>,
    pub weight_files: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_precision: Option<MaskPrecisionReport>,
}

/// Refreshes weights for the first `n` images of `split`, writes heatmap and
/// partition overlays under `maskdump/overlays` and raw weight maps plus
/// partitions under `maskdump/weights`.
pub fn cmd_maskdump(dir: &Path, n: usize, split: Split, seed: u64) -> anyhow::Result<MaskDumpSummary> {
    let o = open_run(dir)?;
    let data = select(split, &o.train, &o.val).head(n);
    let model = o.model.as_classifier();
    let cfg = model.config().clone();
    let t = &o.resolved.train;
    let rows = eval_partitions(model, &data, &o.stats, &t.ratios, t.sampling, true, seed, o.epoch)?;
    let overlay_dir = o.run.path.join("maskdump").join("overlays");
    let weight_dir = o.run.path.join("maskdump").join("weights");
    let mut summary = MaskDumpSummary {
        images: Vec::new(),
        overlay_files: Vec::new(),
        weight_files: Vec::new(),
        mask_precision: None,
    };
    for (s, (local, _, part)) in data.samples.iter().zip(&rows) {
        let rec = eval_record(s.height(), s.width(), cfg.image_height, cfg.image_width);
        let image = apply_record(s.image.view(), &rec);
        let (heat, parts) = export_overlays(image.view(), local, part, &cfg, &overlay_dir)?;
        let (png, json) = write_mask_dump(&weight_dir, local, part)?;
        summary.images.push(s.image_id.clone());
        summary.overlay_files.extend([heat, parts]);
        summary.weight_files.extend([png, json]);
    }
    if let Some(masks) = lesion_masks_at_model_res(&data, &cfg) {
        let parts: Vec<_> = rows.iter().map(|(_, _, p)| p.clone()).collect();
        let weights: Vec<_> = rows.iter().map(|(_, w, _)| w.clone()).collect();
        summary.mask_precision = Some(mask_precision(&parts, Some(&weights), &masks, &cfg)?);
    }
    o.run.write_report("maskdump.json", &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlopsSummary {
    pub full: FlopsReport,
    pub sam: FlopsReport,
    /// `1 − sam / full` on the operation counts, in percent.
    pub flops_reduction_pct: f64,
    /// `1 − tokens_sam / tokens_full`, in percent. Independent of the counting convention.
    pub token_reduction_pct: f64,
}

pub fn flops_summary(model: &PatchConfig, ratios: &MaskingRatios, convention: MacConvention) -> FlopsSummary {
    let n = model.num_patches();
    let full = count_flops(model, n + 1, convention);
    let sam = count_flops(model, ratios.encoder_tokens(n), convention);
    FlopsSummary {
        flops_reduction_pct: 100.0 * (1.0 - sam.total() as f64 / full.total() as f64),
        token_reduction_pct: 100.0 * (1.0 - sam.token_count as f64 / full.token_count as f64),
        full,
        sam,
    }
}

pub fn cmd_flops(settings: &Settings, convention: MacConvention) -> anyhow::Result<FlopsSummary> {
    let r = settings.resolve(Phase::Pretrain)?;
    Ok(flops_summary(&r.model, &r.train.ratios, convention))
}

/// CSV over a grid of mask and throw ratios with `r + t ≤ 1`.
pub fn flops_sweep_csv(model: &PatchConfig, step: f64, convention: MacConvention) -> anyhow::Result<String> {
    if !(step > 0.0 && step <= 1.0) {
        bail!("sweep step must be in (0, 1], got {step}");
    }
    let steps = (1.0 / step).round() as usize;
    let mut out = String::from("mask_ratio,throw_ratio,encoder_tokens,gflops,flops_reduction_pct,token_reduction_pct\n");
    for i in 0..=steps {
        for j in 0..=steps - i {
            let ratios = MaskingRatios {
                mask_ratio: i as f64 * step,
                throw_ratio: j as f64 * step,
            };
            if ratios.validate().is_err() {
                continue;
            }
            let s = flops_summary(model, &ratios, convention);
            writeln!(
                out,
                "{:.4},{:.4},{},{:.4},{:.3},{:.3}",
                ratios.mask_ratio,
                ratios.throw_ratio,
                s.sam.token_count,
                s.sam.giga(),
                s.flops_reduction_pct,
                s.token_reduction_pct
            )?;
        }
    }
    Ok(out)
}

/// Writes a synthetic lesion dataset to `out` for use as `dir:<out>`.
pub fn cmd_gen_synth(n: usize, classes: usize, size: usize, seed: u64, out: &Path) -> anyhow::Result<()> {
    let data = samlab_core::data::generate_synthetic_lesion_dataset(n, classes, size, seed)?;
    save_dataset_dir(&data, out)?;
    Ok(())
}
