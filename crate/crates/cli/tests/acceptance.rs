//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test -p samlab-cli --test acceptance -- 1 4`.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use samlab_cli::cmd_flops;
use samlab_cli::config::Settings;
use samlab_core::data::{eval_record, generate_synthetic_lesion_dataset, ChannelStats, Dataset};
use samlab_core::masking::{
    partition, pixel_map_to_patch_weights, sample_indices, MaskingRatios, MaskingStrategy, SamplingMode,
};
use samlab_core::metrics::{mask_precision, MacConvention, MaskPrecisionReport};
use samlab_core::model::checkpoint::{self, CheckpointMeta, LoadedModel, ModelKind};
use samlab_core::model::{HeadKind, ImageClassifier, MaskedAutoencoder, Module, PatchConfig, VitClassifier};
use samlab_core::training::{
    cross_entropy_logits, evaluate, finetune, masking_weights_for, normalize_target_patches, partitions_for_dataset,
    prepare_patches, pretrain, recon_loss, update_masking_weights, EpochMetrics, ReconLossKind, TrainRunConfig,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "FLOPs reduction", flops_reduction),
        (2, "partition correctness", partition_correctness),
        (3, "sampling distribution", sampling_distribution),
        (4, "gradient integrity", gradient_integrity),
        (5, "MAE equivalence", mae_equivalence),
        (6, "SAM masking precision", sam_masking_precision),
        (7, "token-count consistency", token_consistency),
        (8, "overfit smoke tests", overfit_smoke),
        (9, "determinism and persistence", determinism_and_persistence),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let outcome = run();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id} [{name}]: PASS ({secs:.1}s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} [{name}]: FAIL ({secs:.1}s) {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}

fn tiny_config(image: usize, d: usize, heads: usize, depth: usize, k: usize) -> PatchConfig {
    PatchConfig {
        image_height: image,
        image_width: image,
        patch_size: 8,
        embed_dim: d,
        num_heads: heads,
        encoder_depth: depth,
        decoder_dim: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        num_classes: k,
        mlp_ratio: 4,
    }
}

// ---------------------------------------------------------------------------
// 1

fn flops_reduction() -> Outcome {
    let settings = Settings {
        model: Some("vit_base".into()),
        mask_ratio: Some(0.45),
        throw_ratio: Some(0.30),
        ..Settings::default()
    };
    let s = cmd_flops(&settings, MacConvention::OneOp).map_err(|e| e.to_string())?;
    let full = s.full.giga();
    let sam = s.sam.giga();
    let full_dev = (full - 16.86).abs() / 16.86;
    let sam_dev = (sam - 4.37).abs() / 4.37;
    let tokens = 100.0 * (1.0 - s.sam.token_count as f64 / s.full.token_count as f64);
    check(
        full_dev <= 0.06 && sam_dev <= 0.06 && (tokens - 74.08).abs() <= 1.5,
        format!(
            "full {full:.2}G ({:+.1}%), sam {sam:.2}G ({:+.1}%), token reduction {tokens:.2}%",
            100.0 * (full - 16.86) / 16.86,
            100.0 * (sam - 4.37) / 4.37
        ),
    )
}

// ---------------------------------------------------------------------------
// 2

/// Sort-and-slice: highest weight first, ties broken by lower index.
fn brute_force_split(w: &[f64], r: f64, t: f64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let n = w.len();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 1..n {
        let mut j = i;
        while j > 0 && (w[idx[j]] > w[idx[j - 1]] || (w[idx[j]] == w[idx[j - 1]] && idx[j] < idx[j - 1])) {
            idx.swap(j, j - 1);
            j -= 1;
        }
    }
    let n_mask = (n as f64 * r).floor() as usize;
    let cut = (n as f64 * (r + t)).floor() as usize;
    (idx[..n_mask].to_vec(), idx[n_mask..cut].to_vec(), idx[cut..].to_vec())
}

fn partition_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws = 10_000;
    for draw in 0..draws {
        let n = rng.random_range(1..=256usize);
        let r = rng.random_range(0.0..=1.0f64);
        let t = rng.random_range(0.0..=(1.0 - r));
        let ratios = MaskingRatios::new(r, t).map_err(|e| format!("draw {draw}: {e}"))?;
        // A quarter of the draws use coarse weights so ties occur.
        let coarse = draw % 4 == 0;
        let w: Vec<f64> = (0..n)
            .map(|_| {
                let v = rng.random_range(0.0..1.0f64);
                if coarse {
                    (v * 5.0).floor() / 4.0
                } else {
                    v
                }
            })
            .collect();
        let (mask, throw, vis) = brute_force_split(&w, r, t);
        let want_mask = (n as f64 * r).floor() as usize;
        let want_cut = (n as f64 * (r + t)).floor() as usize;
        for mode in [SamplingMode::Deterministic, SamplingMode::Stochastic] {
            let order = sample_indices(&w, mode, draw as u64);
            let p = partition(&order, &ratios, n).map_err(|e| format!("draw {draw}: {e}"))?;
            let mut seen = vec![0u8; n];
            for &i in p.mask.iter().chain(&p.throw).chain(&p.vis) {
                if i >= n {
                    return Err(format!("draw {draw}: index {i} out of range {n}"));
                }
                seen[i] += 1;
            }
            if seen.iter().any(|&c| c != 1) {
                return Err(format!("draw {draw} ({mode:?}): not a disjoint cover of {n}"));
            }
            if p.mask.len() != want_mask || p.mask.len() + p.throw.len() != want_cut {
                return Err(format!(
                    "draw {draw}: n={n} r={r} t={t} gave |mask|={} |throw|={}, want {want_mask} and {}",
                    p.mask.len(),
                    p.throw.len(),
                    want_cut - want_mask
                ));
            }
            if mode == SamplingMode::Deterministic && (p.mask != mask || p.throw != throw || p.vis != vis) {
                return Err(format!("draw {draw}: deterministic partition differs from the oracle"));
            }
        }
    }
    Ok(format!("{draws} draws, both modes covered, deterministic mode equals oracle"))
}

// ---------------------------------------------------------------------------
// 3

fn sampling_distribution() -> Outcome {
    let draws = 1000u64;
    let n = 16;
    let mut peaked = vec![0.01 / (n - 1) as f64; n];
    peaked[0] = 0.99;
    let first_zero = (0..draws)
        .filter(|&s| sample_indices(&peaked, SamplingMode::Stochastic, s).order[0] == 0)
        .count();
    let peaked_rate = first_zero as f64 / draws as f64;

    let uniform = vec![0.5; n];
    let mut counts = vec![0usize; n];
    for s in 0..draws {
        counts[sample_indices(&uniform, SamplingMode::Stochastic, 10_000 + s).order[0]] += 1;
    }
    let p = 1.0 / n as f64;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    let expected = draws as f64 * p;
    let worst = counts
        .iter()
        .map(|&c| (c as f64 - expected).abs() / sigma)
        .fold(0.0, f64::max);
    check(
        peaked_rate >= 0.90 && worst <= 3.0,
        format!("index 0 first in {:.1}% of peaked draws; uniform max deviation {worst:.2}σ", 100.0 * peaked_rate),
    )
}

// ---------------------------------------------------------------------------
// 4

fn joint_loss(model: &MaskedAutoencoder, patches: &Array2<f64>, vis: &[usize], mask: &[usize], label: usize) -> f64 {
    let (fwd, _) = model.forward_masked(patches, vis, mask).expect("forward");
    let target = normalize_target_patches(patches.select(ndarray::Axis(0), mask).view());
    let (l_con, _) = recon_loss(&fwd.prediction.predicted_pixels, &target, ReconLossKind::Mse).expect("loss");
    let (l_cls, _) = cross_entropy_logits(&fwd.logits, label).expect("ce");
    l_con + 0.1 * l_cls
}

fn gradient_integrity() -> Outcome {
    let cfg = tiny_config(16, 8, 2, 1, 2);
    let mut model = MaskedAutoencoder::new(cfg.clone(), 3).map_err(|e| e.to_string())?;
    // Perturb every parameter so biases and norms are not at their symmetric init.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    model.visit_mut("", &mut |_, p| p.value.mapv_inplace(|v| v + rng.random_range(-0.2..0.2)));
    let patches = Array2::from_shape_fn((4, cfg.patch_dim()), |_| rng.random_range(-1.0..1.0));
    let (mask, vis, label) = (vec![2usize], vec![3usize, 0], 1usize);
    // Index 1 is thrown.

    model.zero_grad();
    let (fwd, cache) = model.forward_masked(&patches, &vis, &mask).map_err(|e| e.to_string())?;
    let target = normalize_target_patches(patches.select(ndarray::Axis(0), &mask).view());
    let (_, d_pred) = recon_loss(&fwd.prediction.predicted_pixels, &target, ReconLossKind::Mse).map_err(|e| e.to_string())?;
    let (_, d_logits) = cross_entropy_logits(&fwd.logits, label).map_err(|e| e.to_string())?;
    let d_logits: Vec<f64> = d_logits.iter().map(|g| 0.1 * g).collect();
    model.backward_masked(cache, &d_pred, &d_logits);

    let mut analytic: Vec<(String, Array2<f64>)> = Vec::new();
    model.visit("", &mut |name, p| analytic.push((name.to_string(), p.grad.clone())));

    let h = 1e-4;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (name, grad) in &analytic {
        for ((r, c), &a) in grad.indexed_iter() {
            let shifted = |delta: f64| {
                let mut m = model.clone();
                m.visit_mut("", &mut |n, p| {
                    if n == name {
                        p.value[[r, c]] += delta;
                    }
                });
                joint_loss(&m, &patches, &vis, &mask, label)
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            // Relative error with a floor so exact zeros compare absolutely.
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            checked += 1;
            if rel > worst.0 {
                worst = (rel, format!("{name}[{r},{c}] analytic {a:.3e} numeric {numeric:.3e}"));
            }
        }
    }
    check(
        worst.0 <= 1e-3,
        format!("{checked} parameters, worst relative error {:.2e} at {}", worst.0, worst.1),
    )
}

// ---------------------------------------------------------------------------
// 5: a plain, loop-based MAE forward pass written independently of the model code.

mod oracle {
    use std::collections::BTreeMap;

    use ndarray::Array2;

    pub struct Mat {
        pub rows: usize,
        pub cols: usize,
        pub data: Vec<f64>,
    }

    impl Mat {
        pub fn zeros(rows: usize, cols: usize) -> Self {
            Self {
                rows,
                cols,
                data: vec![0.0; rows * cols],
            }
        }

        pub fn from_array(a: &Array2<f64>) -> Self {
            Self {
                rows: a.nrows(),
                cols: a.ncols(),
                data: a.iter().copied().collect(),
            }
        }

        pub fn at(&self, r: usize, c: usize) -> f64 {
            self.data[r * self.cols + c]
        }

        pub fn set(&mut self, r: usize, c: usize, v: f64) {
            self.data[r * self.cols + c] = v;
        }
    }

    pub type Params = BTreeMap<String, Mat>;

    fn linear(x: &Mat, p: &Params, name: &str) -> Mat {
        let w = &p[&format!("{name}.weight")];
        let b = &p[&format!("{name}.bias")];
        let mut y = Mat::zeros(x.rows, w.cols);
        for i in 0..x.rows {
            for j in 0..w.cols {
                let mut acc = b.at(0, j);
                for k in 0..x.cols {
                    acc += x.at(i, k) * w.at(k, j);
                }
                y.set(i, j, acc);
            }
        }
        y
    }

    fn layer_norm(x: &Mat, p: &Params, name: &str) -> Mat {
        let g = &p[&format!("{name}.weight")];
        let b = &p[&format!("{name}.bias")];
        let mut y = Mat::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let row = &x.data[i * x.cols..(i + 1) * x.cols];
            let mean = row.iter().sum::<f64>() / x.cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.cols as f64;
            for j in 0..x.cols {
                y.set(i, j, (row[j] - mean) / (var + 1e-6).sqrt() * g.at(0, j) + b.at(0, j));
            }
        }
        y
    }

    fn erf(x: f64) -> f64 {
        // Maclaurin series for small |x|, continued fraction otherwise.
        if x.abs() < 3.0 {
            let mut term = x;
            let mut sum = x;
            for n in 1..200 {
                term *= -x * x / n as f64;
                sum += term / (2 * n + 1) as f64;
                if term.abs() < 1e-18 {
                    break;
                }
            }
            2.0 / std::f64::consts::PI.sqrt() * sum
        } else {
            let z = x.abs();
            let mut f = 0.0;
            for k in (1..80).rev() {
                f = (k as f64 / 2.0) / (z + f);
            }
            let erfc = (-z * z).exp() / std::f64::consts::PI.sqrt() / (z + f);
            x.signum() * (1.0 - erfc)
        }
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + erf(x / 2f64.sqrt()))
    }

    fn add(a: &Mat, b: &Mat) -> Mat {
        Mat {
            rows: a.rows,
            cols: a.cols,
            data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
        }
    }

    fn attention(x: &Mat, p: &Params, name: &str, heads: usize) -> Mat {
        let qkv = linear(x, p, &format!("{name}.qkv"));
        let (n, d) = (x.rows, x.cols);
        let dh = d / heads;
        let mut mixed = Mat::zeros(n, d);
        for h in 0..heads {
            for i in 0..n {
                let mut scores: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..dh).map(|c| qkv.at(i, h * dh + c) * qkv.at(j, d + h * dh + c)).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for s in scores.iter_mut() {
                    *s = (*s - m).exp() / z;
                }
                for c in 0..dh {
                    let v: f64 = (0..n).map(|j| scores[j] * qkv.at(j, 2 * d + h * dh + c)).sum();
                    mixed.set(i, h * dh + c, v);
                }
            }
        }
        linear(&mixed, p, &format!("{name}.proj"))
    }

    fn block(x: &Mat, p: &Params, name: &str, heads: usize) -> Mat {
        let a = attention(&layer_norm(x, p, &format!("{name}.norm1")), p, &format!("{name}.attn"), heads);
        let x = add(x, &a);
        let mut hidden = linear(&layer_norm(&x, p, &format!("{name}.norm2")), p, &format!("{name}.mlp.fc1"));
        hidden.data.iter_mut().for_each(|v| *v = gelu(*v));
        let m = linear(&hidden, p, &format!("{name}.mlp.fc2"));
        add(&x, &m)
    }

    /// Row `gy·gw + gx`: sin/cos of `gx` in the first half, of `gy` in the second.
    pub fn pos_embed(dim: usize, gh: usize, gw: usize) -> Mat {
        let mut m = Mat::zeros(gh * gw, dim);
        let quarter = dim / 4;
        for gy in 0..gh {
            for gx in 0..gw {
                for (offset, pos) in [(0, gx as f64), (dim / 2, gy as f64)] {
                    for i in 0..quarter {
                        let omega = 10000f64.powf(-(i as f64) / quarter as f64);
                        m.set(gy * gw + gx, offset + i, (pos * omega).sin());
                        m.set(gy * gw + gx, offset + quarter + i, (pos * omega).cos());
                    }
                }
            }
        }
        m
    }

    pub struct Dims {
        pub gh: usize,
        pub gw: usize,
        pub d: usize,
        pub heads: usize,
        pub depth: usize,
        pub dd: usize,
        pub dheads: usize,
        pub ddepth: usize,
    }

    /// Plain MAE reconstruction loss with per-patch normalized targets.
    pub fn mae_loss(patches: &Mat, p: &Params, dims: &Dims, mask: &[usize]) -> f64 {
        let n = patches.rows;
        let keep: Vec<usize> = (0..n).filter(|i| !mask.contains(i)).collect();
        let pos = pos_embed(dims.d, dims.gh, dims.gw);
        let mut x = Mat::zeros(keep.len() + 1, dims.d);
        let cls = &p["encoder.cls_token"];
        for c in 0..dims.d {
            x.set(0, c, cls.at(0, c));
        }
        for (r, &k) in keep.iter().enumerate() {
            let row = Mat {
                rows: 1,
                cols: patches.cols,
                data: patches.data[k * patches.cols..(k + 1) * patches.cols].to_vec(),
            };
            let e = linear(&row, p, "encoder.patch_embed");
            for c in 0..dims.d {
                x.set(r + 1, c, e.at(0, c) + pos.at(k, c));
            }
        }
        for b in 0..dims.depth {
            x = block(&x, p, &format!("encoder.blocks.{b}"), dims.heads);
        }
        let x = layer_norm(&x, p, "encoder.norm");

        // Decoder in spatial order, without the class token.
        let mut enc_rows = Mat::zeros(keep.len(), dims.d);
        enc_rows.data.copy_from_slice(&x.data[dims.d..]);
        let projected = linear(&enc_rows, p, "decoder.embed");
        let dpos = pos_embed(dims.dd, dims.gh, dims.gw);
        let mask_token = &p["decoder.mask_token"];
        let mut y = Mat::zeros(n, dims.dd);
        for i in 0..n {
            for c in 0..dims.dd {
                let base = match keep.iter().position(|&k| k == i) {
                    Some(r) => projected.at(r, c),
                    None if mask.contains(&i) => mask_token.at(0, c),
                    None => unreachable!("every index is kept or masked"),
                };
                y.set(i, c, base + dpos.at(i, c));
            }
        }
        for b in 0..dims.ddepth {
            y = block(&y, p, &format!("decoder.blocks.{b}"), dims.dheads);
        }
        let pred = linear(&layer_norm(&y, p, "decoder.norm"), p, "decoder.pred");

        let mut total = 0.0;
        for &m in mask {
            let target = &patches.data[m * patches.cols..(m + 1) * patches.cols];
            let k = target.len() as f64;
            let mean = target.iter().sum::<f64>() / k;
            let var = target.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
            for (c, &t) in target.iter().enumerate() {
                let norm = (t - mean) / (var + 1e-6).sqrt();
                total += (pred.at(m, c) - norm).powi(2);
            }
        }
        total / (mask.len() * patches.cols) as f64
    }
}

fn collect_params(model: &dyn Module) -> oracle::Params {
    let mut out = BTreeMap::new();
    model.visit("", &mut |name, p| {
        out.insert(name.to_string(), oracle::Mat::from_array(&p.value));
    });
    out
}

fn mae_config(epochs: usize, seed: u64) -> TrainRunConfig {
    let mut cfg = TrainRunConfig {
        epochs,
        warmup_epochs: 5,
        batch_size: 16,
        ratios: MaskingRatios::new(0.75, 0.0).expect("valid"),
        strategy: MaskingStrategy::Random,
        seed,
        ..TrainRunConfig::pretrain_default()
    };
    cfg.loss.lambda_cls = 0.0;
    cfg
}

fn mae_equivalence() -> Outcome {
    let cfg = PatchConfig {
        decoder_dim: 16,
        decoder_depth: 2,
        ..tiny_config(32, 16, 2, 2, 4)
    };
    let model = MaskedAutoencoder::new(cfg.clone(), 11).map_err(|e| e.to_string())?;
    let data = generate_synthetic_lesion_dataset(1, 4, 32, 8).map_err(|e| e.to_string())?;
    let s = &data.samples[0];
    let patches = prepare_patches(s.image.view(), &eval_record(32, 32, 32, 32), &ChannelStats::identity(), 8)
        .map_err(|e| e.to_string())?;
    let ratios = MaskingRatios::new(0.75, 0.0).expect("valid");
    let order = sample_indices(&[1.0; 16], SamplingMode::Stochastic, 4);
    let part = partition(&order, &ratios, 16).map_err(|e| e.to_string())?;

    let (fwd, _) = model.forward_masked(&patches, &part.vis, &part.mask).map_err(|e| e.to_string())?;
    let target = normalize_target_patches(patches.select(ndarray::Axis(0), &part.mask).view());
    let (ours, _) = recon_loss(&fwd.prediction.predicted_pixels, &target, ReconLossKind::Mse).map_err(|e| e.to_string())?;
    let dims = oracle::Dims {
        gh: 4,
        gw: 4,
        d: 16,
        heads: 2,
        depth: 2,
        dd: 16,
        dheads: 2,
        ddepth: 2,
    };
    let reference = oracle::mae_loss(&oracle::Mat::from_array(&patches), &collect_params(&model), &dims, &part.mask);
    let first_step_diff = (ours - reference).abs();

    // Loss curves from two seeds on the same data.
    let train = generate_synthetic_lesion_dataset(64, 4, 32, 21).map_err(|e| e.to_string())?;
    let mut curves = Vec::new();
    for seed in [1u64, 2] {
        let mut m = MaskedAutoencoder::new(cfg.clone(), seed).map_err(|e| e.to_string())?;
        let log = pretrain(&mut m, &train, &mae_config(50, seed), &mut ()).map_err(|e| e.to_string())?;
        if log.log.iter().any(|e| e.l_total != e.l_con) {
            return Err("λ=0 total loss differs from the reconstruction loss".into());
        }
        curves.push(log.log.iter().map(|e| e.l_con).collect::<Vec<_>>());
    }
    let tail = |c: &[f64]| {
        let t = &c[c.len() - 10..];
        let mean = t.iter().sum::<f64>() / 10.0;
        let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
        (mean, var)
    };
    let ((ma, va), (mb, vb)) = (tail(&curves[0]), tail(&curves[1]));
    let se = (va / 10.0 + vb / 10.0).sqrt();
    let z = (ma - mb).abs() / se;
    check(
        first_step_diff <= 1e-6 && z <= 3.0,
        format!(
            "first-step L_con {ours:.9} vs oracle {reference:.9} (|Δ| {first_step_diff:.1e}); \
             last-10-epoch L_con {ma:.4} vs {mb:.4}, |Δ| = {z:.2} standard errors"
        ),
    )
}

// ---------------------------------------------------------------------------
// 6

struct PrecisionRun {
    report: MaskPrecisionReport,
    train_acc: f64,
}

fn precision_of(model: &MaskedAutoencoder, val: &Dataset, stats: &ChannelStats, strategy: MaskingStrategy) -> Result<MaskPrecisionReport, String> {
    let cfg = &model.cfg;
    let ratios = MaskingRatios::sam_default();
    let masks: Vec<_> = val.samples.iter().map(|s| s.lesion_mask.clone().expect("synthetic masks")).collect();
    let weights = val
        .samples
        .iter()
        .map(|s| {
            let mw = masking_weights_for(model, s, stats, 0)?;
            pixel_map_to_patch_weights(&mw, &eval_record(s.height(), s.width(), cfg.image_height, cfg.image_width), cfg)
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let parts = partitions_for_dataset(model, val, stats, strategy, &ratios, SamplingMode::Stochastic, 7).map_err(|e| e.to_string())?;
    mask_precision(&parts, Some(&weights), &masks, cfg).map_err(|e| e.to_string())
}

fn precision_run(train: &Dataset, val: &Dataset, strategy: MaskingStrategy) -> Result<PrecisionRun, String> {
    let cfg = PatchConfig::desk(4);
    let mut model = MaskedAutoencoder::new(cfg, 0).map_err(|e| e.to_string())?;
    let mut run = TrainRunConfig {
        epochs: 150,
        warmup_epochs: 40,
        weight_update_interval: 20,
        batch_size: 32,
        strategy,
        ..TrainRunConfig::pretrain_default()
    };
    run.loss.lambda_cls = 1.0;
    let report = pretrain(&mut model, train, &run, &mut ()).map_err(|e| e.to_string())?;
    let train_acc = report.log.last().and_then(|m| m.train_acc).unwrap_or(0.0);
    Ok(PrecisionRun {
        report: precision_of(&model, val, &report.stats, MaskingStrategy::Sam)?,
        train_acc,
    })
}

fn sam_masking_precision() -> Outcome {
    let train = generate_synthetic_lesion_dataset(512, 4, 64, 0).map_err(|e| e.to_string())?;
    let val = generate_synthetic_lesion_dataset(128, 4, 64, 99).map_err(|e| e.to_string())?;
    let sam = precision_run(&train, &val, MaskingStrategy::Sam)?;
    let amt = precision_run(&train, &val, MaskingStrategy::Amt)?;
    let untrained = MaskedAutoencoder::new(PatchConfig::desk(4), 0).map_err(|e| e.to_string())?;
    let random = precision_of(&untrained, &val, &train.channel_stats(), MaskingStrategy::Random)?;
    let s = &sam.report;
    let hit = s.argmax_hit_rate.unwrap_or(0.0);
    check(
        s.lesion_mask_rate >= 1.5 * random.lesion_mask_rate
            && hit >= 0.70
            && s.lesion_mask_rate > amt.report.lesion_mask_rate,
        format!(
            "lesion_mask_rate sam {:.3} / random {:.3} / amt {:.3}; argmax hit sam {hit:.3} (amt {:.3}); \
             final train acc sam {:.2} amt {:.2}",
            s.lesion_mask_rate,
            random.lesion_mask_rate,
            amt.report.lesion_mask_rate,
            amt.report.argmax_hit_rate.unwrap_or(0.0),
            sam.train_acc,
            amt.train_acc
        ),
    )
}

// ---------------------------------------------------------------------------
// 7

fn token_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut cases = 0;
    for image in [16usize, 24, 32, 48] {
        let cfg = tiny_config(image, 8, 2, 1, 2);
        let n = cfg.num_patches();
        let data = generate_synthetic_lesion_dataset(4, 2, image.max(32), 3).map_err(|e| e.to_string())?;
        for _ in 0..3 {
            let r = (rng.random_range(0.0..0.9f64) * 100.0).round() / 100.0;
            let t = (rng.random_range(0.0..(1.0 - r)) * 100.0).round() / 100.0;
            let ratios = MaskingRatios::new(r, t).map_err(|e| e.to_string())?;
            let expected = ratios.encoder_tokens(n);
            let run = TrainRunConfig {
                epochs: 2,
                warmup_epochs: 1,
                batch_size: 2,
                weight_update_interval: 1,
                ratios,
                ..TrainRunConfig::pretrain_default()
            };
            let mut mae = MaskedAutoencoder::new(cfg.clone(), 1).map_err(|e| e.to_string())?;
            let pre = pretrain(&mut mae, &data, &run, &mut ()).map_err(|e| e.to_string())?;
            let mut clf = VitClassifier::from_pretrained(&mae, true, false, 2);
            let ft_cfg = TrainRunConfig {
                epochs: 1,
                warmup_epochs: 0,
                batch_size: 2,
                ratios,
                ..TrainRunConfig::finetune_default()
            };
            let ft = finetune(&mut clf, &data, None, &ft_cfg, &mut ()).map_err(|e| e.to_string())?;
            let pre_tokens = pre.log[1].encoder_tokens;
            let ft_tokens = ft.log[0].encoder_tokens;
            if pre_tokens != expected || ft_tokens != pre_tokens {
                return Err(format!(
                    "N={n} r={r} t={t}: pre-training {pre_tokens}, fine-tuning {ft_tokens}, expected {expected}"
                ));
            }
            let s = &data.samples[0];
            let patches = prepare_patches(
                s.image.view(),
                &eval_record(s.height(), s.width(), image, image),
                &pre.stats,
                cfg.patch_size,
            )
            .map_err(|e| e.to_string())?;
            let full = clf.encoder.encode_full(&patches).map_err(|e| e.to_string())?;
            if full.num_tokens() != n + 1 {
                return Err(format!("N={n}: evaluation encoded {} tokens", full.num_tokens()));
            }
            evaluate(&clf, &data, &pre.stats).map_err(|e| e.to_string())?;
            cases += 1;
        }
    }
    Ok(format!("{cases} (N, r, t) cases: pre-training == fine-tuning token counts, evaluation N+1"))
}

// ---------------------------------------------------------------------------
// 8

fn overfit_smoke() -> Outcome {
    let cfg = tiny_config(32, 32, 2, 2, 4);
    let batch = generate_synthetic_lesion_dataset(8, 4, 32, 12).map_err(|e| e.to_string())?;
    let mut mae = MaskedAutoencoder::new(cfg.clone(), 0).map_err(|e| e.to_string())?;
    let pre_cfg = TrainRunConfig {
        epochs: 200,
        warmup_epochs: 5,
        batch_size: 8,
        weight_update_interval: 20,
        augment: false,
        strategy: MaskingStrategy::Sam,
        base_lr: 3e-3,
        min_lr: 1e-4,
        ..TrainRunConfig::pretrain_default()
    };
    let pre = pretrain(&mut mae, &batch, &pre_cfg, &mut ()).map_err(|e| e.to_string())?;
    let pre_step = pre.log.iter().position(|m| m.l_cls < 0.05);

    let mut clf = VitClassifier::new(cfg, true, 0).map_err(|e| e.to_string())?;
    let ft_cfg = TrainRunConfig {
        epochs: 300,
        warmup_epochs: 5,
        batch_size: 8,
        augment: false,
        min_lr: 1e-4,
        ..TrainRunConfig::finetune_default()
    };
    let ft = finetune(&mut clf, &batch, None, &ft_cfg, &mut ()).map_err(|e| e.to_string())?;
    let ft_step = ft.log.iter().position(|m| m.train_acc == Some(1.0));
    let min_cls = pre.log.iter().map(|m| m.l_cls).fold(f64::INFINITY, f64::min);
    check(
        pre_step.is_some() && ft_step.is_some(),
        format!(
            "pre-training L_cls < 0.05 at step {} (min {min_cls:.4}); fine-tuning 100% train accuracy at step {}",
            pre_step.map_or("never".into(), |s| (s + 1).to_string()),
            ft_step.map_or("never".into(), |s| (s + 1).to_string())
        ),
    )
}

// ---------------------------------------------------------------------------
// 9

fn without_time(log: &[EpochMetrics]) -> Vec<EpochMetrics> {
    log.iter()
        .cloned()
        .map(|mut m| {
            m.wall_time_s = 0.0;
            m
        })
        .collect()
}

fn determinism_and_persistence() -> Outcome {
    let cfg = tiny_config(32, 16, 2, 2, 4);
    let data = generate_synthetic_lesion_dataset(16, 4, 32, 31).map_err(|e| e.to_string())?;
    let run = TrainRunConfig {
        epochs: 6,
        warmup_epochs: 2,
        batch_size: 4,
        weight_update_interval: 2,
        ..TrainRunConfig::pretrain_default()
    };
    let mut a = MaskedAutoencoder::new(cfg.clone(), 9).map_err(|e| e.to_string())?;
    let mut b = MaskedAutoencoder::new(cfg.clone(), 9).map_err(|e| e.to_string())?;
    let ra = pretrain(&mut a, &data, &run, &mut ()).map_err(|e| e.to_string())?;
    let rb = pretrain(&mut b, &data, &run, &mut ()).map_err(|e| e.to_string())?;
    let logs_equal = without_time(&ra.log) == without_time(&rb.log)
        && ra.log.iter().zip(&rb.log).all(|(x, y)| x.l_total.to_bits() == y.l_total.to_bits());
    if !logs_equal {
        return Err("two runs with the same seed produced different metric logs".into());
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.safetensors");
    let meta = CheckpointMeta {
        kind: ModelKind::Pretrain,
        config: cfg.clone(),
        epoch: run.epochs,
        seed: 9,
        head: HeadKind::Mlp,
        global_pool: false,
        normalization: Some(ra.stats),
    };
    checkpoint::save(&path, &a, &meta).map_err(|e| e.to_string())?;
    let (loaded_meta, loaded) = checkpoint::load(&path).map_err(|e| e.to_string())?;
    let LoadedModel::Pretrain(restored) = &loaded else {
        return Err("checkpoint came back as a fine-tuning model".into());
    };
    let mut outputs_equal = loaded_meta == meta;
    for s in &data.samples {
        let patches = prepare_patches(s.image.view(), &eval_record(32, 32, 32, 32), &ra.stats, 8).map_err(|e| e.to_string())?;
        let x = a.predict_logits(&patches).map_err(|e| e.to_string())?;
        let y = restored.predict_logits(&patches).map_err(|e| e.to_string())?;
        outputs_equal &= x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits());
        let vis = [0usize, 5, 9];
        let masked = [1usize, 2, 15];
        let (fa, _) = a.forward_masked(&patches, &vis, &masked).map_err(|e| e.to_string())?;
        let (fb, _) = restored.forward_masked(&patches, &vis, &masked).map_err(|e| e.to_string())?;
        outputs_equal &= fa.prediction == fb.prediction;
    }
    if !outputs_equal {
        return Err("checkpoint round trip changed model outputs".into());
    }

    let first = update_masking_weights(&a, &data, &ra.stats, 6).map_err(|e| e.to_string())?;
    let second = update_masking_weights(&a, &data, &ra.stats, 6).map_err(|e| e.to_string())?;
    let from_restored = update_masking_weights(restored, &data, &ra.stats, 6).map_err(|e| e.to_string())?;
    if first != second || first != from_restored {
        return Err("weight cache refresh is not idempotent under frozen parameters".into());
    }
    Ok(format!(
        "{} epochs logged identically, checkpoint outputs bit-exact, {} cached weight maps stable",
        ra.log.len(),
        first.len()
    ))
}
