//! Run-directory layout:
//!
//! ```text
//! <run>/config.toml            resolved configuration
//! <run>/metrics.jsonl          one JSON object per epoch
//! <run>/checkpoints/*.safetensors
//! <run>/reports/*.json
//! <run>/maskdump/...
//! ```

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use samlab_core::data::ChannelStats;
use samlab_core::model::checkpoint::{self, CheckpointMeta, ModelKind};
use samlab_core::model::{HeadKind, Module, PatchConfig};
use samlab_core::training::{EpochMetrics, TrainObserver};
use samlab_core::{Error, Result};

use crate::config::{Phase, Resolved, Settings};

pub const RUNS_ENV: &str = "SAMLAB_RUNS";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "last.safetensors";

#[derive(Clone, Debug)]
pub struct RunDirectory {
    pub path: PathBuf,
}

/// `$SAMLAB_RUNS`, or `./runs` when unset.
pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

impl RunDirectory {
    /// Creates `dir`, or `<runs root>/<name>` with a numeric suffix when the
    /// name is taken.
    pub fn create(dir: Option<&Path>, name: &str) -> anyhow::Result<Self> {
        let path = match dir {
            Some(d) => d.to_path_buf(),
            None => {
                let root = runs_root();
                let mut candidate = root.join(name);
                let mut i = 1;
                while candidate.exists() {
                    candidate = root.join(format!("{name}-{i}"));
                    i += 1;
                }
                candidate
            }
        };
        std::fs::create_dir_all(path.join("checkpoints"))
            .with_context(|| format!("creating run directory {}", path.display()))?;
        std::fs::create_dir_all(path.join("reports"))?;
        // A rerun into the same directory starts a fresh log.
        File::create(path.join(METRICS_FILE))?;
        Ok(Self { path })
    }

    pub fn open(path: &Path) -> anyhow::Result<Self> {
        if !path.join(CONFIG_FILE).is_file() {
            bail!("{} is not a run directory (no {CONFIG_FILE})", path.display());
        }
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn write_config(&self, resolved: &Resolved) -> anyhow::Result<()> {
        let phase = match resolved.phase {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        };
        let body = toml::to_string(&resolved.snapshot())?;
        std::fs::write(self.path.join(CONFIG_FILE), format!("# phase: {phase}\n{body}"))?;
        Ok(())
    }

    pub fn read_settings(&self) -> anyhow::Result<Settings> {
        Settings::load(&self.path.join(CONFIG_FILE))
    }

    pub fn phase(&self) -> anyhow::Result<Phase> {
        let text = std::fs::read_to_string(self.path.join(CONFIG_FILE))?;
        match text.lines().next() {
            Some("# phase: finetune") => Ok(Phase::Finetune),
            _ => Ok(Phase::Pretrain),
        }
    }

    pub fn checkpoint_path(&self, epoch: Option<usize>) -> PathBuf {
        let name = match epoch {
            Some(e) => format!("epoch-{e:04}.safetensors"),
            None => LAST_CHECKPOINT.to_string(),
        };
        self.path.join("checkpoints").join(name)
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.path.join("reports").join(name)
    }

    pub fn write_report<T: serde::Serialize>(&self, name: &str, value: &T) -> anyhow::Result<PathBuf> {
        let p = self.report_path(name);
        std::fs::write(&p, serde_json::to_string_pretty(value)?)?;
        Ok(p)
    }

    pub fn metrics(&self) -> anyhow::Result<Vec<EpochMetrics>> {
        let text = std::fs::read_to_string(self.path.join(METRICS_FILE))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .filter(|l| !l.contains("\"event\""))
            .map(|l| serde_json::from_str(l).context("malformed metric line"))
            .collect()
    }
}

/// Streams metrics and checkpoints of a training run into its directory.
pub struct RunRecorder<'a> {
    pub run: &'a RunDirectory,
    pub kind: ModelKind,
    pub config: PatchConfig,
    pub seed: u64,
    pub head: HeadKind,
    pub global_pool: bool,
    pub normalization: ChannelStats,
    pub quiet: bool,
    log: BufWriter<File>,
}

impl<'a> RunRecorder<'a> {
    pub fn new(
        run: &'a RunDirectory,
        kind: ModelKind,
        config: PatchConfig,
        seed: u64,
        head: HeadKind,
        global_pool: bool,
        normalization: ChannelStats,
    ) -> anyhow::Result<Self> {
        let file = OpenOptions::new().append(true).create(true).open(run.path.join(METRICS_FILE))?;
        Ok(Self {
            run,
            kind,
            config,
            seed,
            head,
            global_pool,
            normalization,
            quiet: false,
            log: BufWriter::new(file),
        })
    }

    pub fn meta(&self, epoch: usize) -> CheckpointMeta {
        CheckpointMeta {
            kind: self.kind,
            config: self.config.clone(),
            epoch,
            seed: self.seed,
            head: self.head,
            global_pool: self.global_pool,
            normalization: Some(self.normalization),
        }
    }
}

impl TrainObserver for RunRecorder<'_> {
    fn epoch_end(&mut self, m: &EpochMetrics) -> Result<()> {
        writeln!(self.log, "{}", serde_json::to_string(m)?)?;
        self.log.flush()?;
        if !self.quiet {
            let acc = m.train_acc.map(|a| format!(" train_acc {a:.3}")).unwrap_or_default();
            let val = m.val_acc.map(|a| format!(" val_acc {a:.3}")).unwrap_or_default();
            eprintln!(
                "epoch {:>4}  l_con {:.4}  l_cls {:.4}  lr {:.2e}{acc}{val}  ({:.1}s)",
                m.epoch, m.l_con, m.l_cls, m.lr, m.wall_time_s
            );
        }
        Ok(())
    }

    fn checkpoint(&mut self, epoch: usize, model: &dyn Module) -> Result<()> {
        let meta = self.meta(epoch);
        checkpoint::save(self.run.checkpoint_path(Some(epoch)), model, &meta)?;
        checkpoint::save(self.run.checkpoint_path(None), model, &meta)
    }

    fn diverged(&mut self, error: &Error) {
        if let Error::NonFiniteLoss { epoch, step, l_con, l_cls } = error {
            let record = serde_json::json!({
                "event": "non_finite_loss",
                "epoch": epoch,
                "step": step,
                "l_con": l_con.to_string(),
                "l_cls": l_cls.to_string(),
            });
            let _ = writeln!(self.log, "{record}");
            let _ = self.log.flush();
        }
    }
}
