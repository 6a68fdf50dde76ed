use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use samlab_cli::config::{Phase, Settings};
use samlab_cli::{cmd_eval, cmd_finetune, cmd_flops, cmd_gen_synth, cmd_maskdump, cmd_pretrain, flops_sweep_csv, Split};
use samlab_core::metrics::MacConvention;

#[derive(Parser)]
#[command(name = "samlab", version, about = "Attention-driven masked autoencoder training on small images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train an autoencoder with random, amt or sam masking.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a classifier, optionally from a pre-training checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to warm-start from. Omit to train from scratch.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use every token instead of weighted partitions.
        #[arg(long)]
        no_sam: bool,
        /// Classify from the class token instead of mean-pooled patch tokens.
        #[arg(long)]
        no_global_pool: bool,
    },
    /// Full-token evaluation of a run's last checkpoint.
    Eval {
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
    },
    /// Export weight heatmaps and partition overlays for a few images.
    Maskdump {
        run_dir: PathBuf,
        #[arg(short = 'n', long, default_value_t = 4)]
        n_images: usize,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Analytical encoder FLOPs for full-token and partitioned passes.
    Flops {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "one")]
        convention: Convention,
        /// Emit a CSV over a grid of mask/throw ratios with this step.
        #[arg(long)]
        sweep: Option<f64>,
        /// Print the JSON report instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic lesion dataset to a directory.
    GenSynth {
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    /// A multiply-accumulate is one operation.
    One,
    /// A multiply-accumulate is two operations.
    Two,
}

#[derive(Args)]
struct Common {
    /// Flat TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory. Defaults to a fresh directory under $SAMLAB_RUNS.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set base_lr=5e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    throw_ratio: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    update_interval: Option<usize>,
    #[arg(long)]
    layer_decay: Option<f64>,
    #[arg(long)]
    sampling: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    quiet: bool,
}

impl Common {
    fn settings(&self) -> anyhow::Result<Settings> {
        let base = match &self.config {
            Some(p) => Settings::load(p)?,
            None => Settings::default(),
        };
        let mut pairs = Vec::new();
        let quoted = |k: &str, v: &Option<String>| v.as_ref().map(|v| format!("{k}=\"{v}\""));
        let plain = |k: &str, v: Option<String>| v.map(|v| format!("{k}={v}"));
        pairs.extend(quoted("model", &self.model));
        pairs.extend(quoted("dataset", &self.dataset));
        pairs.extend(quoted("strategy", &self.strategy));
        pairs.extend(quoted("sampling", &self.sampling));
        pairs.extend(plain("epochs", self.epochs.map(|v| v.to_string())));
        pairs.extend(plain("warmup_epochs", self.warmup_epochs.map(|v| v.to_string())));
        pairs.extend(plain("batch_size", self.batch_size.map(|v| v.to_string())));
        pairs.extend(plain("base_lr", self.base_lr.map(|v| format!("{v:?}"))));
        pairs.extend(plain("mask_ratio", self.mask_ratio.map(|v| format!("{v:?}"))));
        pairs.extend(plain("throw_ratio", self.throw_ratio.map(|v| format!("{v:?}"))));
        pairs.extend(plain("lambda", self.lambda.map(|v| format!("{v:?}"))));
        pairs.extend(plain("update_interval", self.update_interval.map(|v| v.to_string())));
        pairs.extend(plain("layer_decay", self.layer_decay.map(|v| format!("{v:?}"))));
        pairs.extend(plain("seed", self.seed.map(|v| v.to_string())));
        pairs.extend(self.set.iter().cloned());
        base.with_overrides(&pairs)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain { common } => {
            let s = cmd_pretrain(&common.settings()?, common.out.as_deref(), common.quiet)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Finetune {
            common,
            checkpoint,
            no_sam,
            no_global_pool,
        } => {
            let mut extra = Vec::new();
            if no_sam {
                extra.push("use_sam=false".to_string());
            }
            if no_global_pool {
                extra.push("global_pool=false".to_string());
            }
            let settings = common.settings()?.with_overrides(&extra)?;
            let s = cmd_finetune(&settings, checkpoint.as_deref(), common.out.as_deref(), common.quiet)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Eval { run_dir, split } => {
            let (report, path) = cmd_eval(&run_dir, split)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            eprintln!("wrote {}", path.display());
        }
        Command::Maskdump {
            run_dir,
            n_images,
            split,
            seed,
        } => {
            let s = cmd_maskdump(&run_dir, n_images, split, seed)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Flops {
            common,
            convention,
            sweep,
            json,
        } => {
            let convention = match convention {
                Convention::One => MacConvention::OneOp,
                Convention::Two => MacConvention::TwoOp,
            };
            let settings = common.settings()?;
            if let Some(step) = sweep {
                let r = settings.resolve(Phase::Pretrain)?;
                print!("{}", flops_sweep_csv(&r.model, step, convention)?);
                return Ok(());
            }
            let s = cmd_flops(&settings, convention)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&s)?);
            } else {
                println!("full-token pass: {:>4} tokens  {:>8.3} G", s.full.token_count, s.full.giga());
                println!("partitioned pass: {:>3} tokens  {:>8.3} G", s.sam.token_count, s.sam.giga());
                println!(
                    "reduction: {:.2}% (operations), {:.2}% (tokens)",
                    s.flops_reduction_pct, s.token_reduction_pct
                );
            }
        }
        Command::GenSynth {
            n,
            classes,
            size,
            seed,
            out,
        } => {
            cmd_gen_synth(n, classes, size, seed, &out).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {n} samples to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
