//! The `tadformer` command line: run configuration, checkpoints, metric
//! logs, parameter tables, attention export and the gradient audit.
//!
//! Every command reads a JSON [`RunConfig`]. `--seed` and `--out` override
//! the file. Exit codes come from [`Error::exit_code`].

mod checkpoint;
mod commands;
mod config;
mod export;
mod grad_check;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use commands::{
    cmd_count_params, cmd_eval, cmd_export_tam, cmd_grad_check, cmd_train, param_table, render_param_csv,
    render_param_table, CSV_HEADER,
};
pub use config::{worker_count, RunConfig, THREADS_ENV};
pub use export::{export_tam, head_average, normalize_to_u8, task_attention_maps, write_pgm, StageTam};
pub use grad_check::{audit_model, grad_check, GradReport, GroupAudit, FLOOR_FRACTION, MAX_PARAMS, TOLERANCE};

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "tadformer", version, about = "Multi-task adapter tuning on a frozen hierarchical transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train, log metrics.csv and write the final checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the held-out samples.
    Eval(WithCheckpoint),
    /// Trainable parameters per group for every tuning mode.
    CountParams(Common),
    /// Write task attention maps of one held-out sample as PGM images.
    ExportTam(ExportArgs),
    /// Finite-difference audit of all trainable gradients (toy models only).
    GradCheck(GradArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Machine-readable output.
    #[arg(long)]
    pub csv: bool,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    /// Loads the config and applies the flag overrides.
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct WithCheckpoint {
    #[command(flatten)]
    pub common: Common,
    /// Defaults to `<out>/checkpoint.tadf`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

impl WithCheckpoint {
    pub fn checkpoint_path(&self, cfg: &RunConfig) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join(commands::CHECKPOINT_FILE))
    }
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub inner: WithCheckpoint,
    /// Index into the held-out samples.
    #[arg(long, default_value_t = 0)]
    pub sample: u64,
}

#[derive(Debug, Clone, Args)]
pub struct GradArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, hide = true)]
    pub corrupt_group: Option<String>,
}

/// Runs a parsed command, writing its report to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Train(c) => cmd_train(&c.load()?, out),
        Command::Eval(a) => {
            let cfg = a.common.load()?;
            cmd_eval(&cfg, &a.checkpoint_path(&cfg), a.common.csv, out)
        }
        Command::CountParams(c) => cmd_count_params(&c.load()?, c.csv, out),
        Command::ExportTam(a) => {
            let cfg = a.inner.common.load()?;
            cmd_export_tam(&cfg, &a.inner.checkpoint_path(&cfg), a.sample, out)
        }
        Command::GradCheck(a) => {
            let corrupt = match &a.corrupt_group {
                Some(name) => Some(crate::params::ParamGroup::from_name(name).ok_or_else(|| {
                    Error::config(format!("corrupt-group: unknown parameter group `{name}`"))
                })?),
                None => None,
            };
            cmd_grad_check(&a.common.load()?, corrupt, a.common.csv, out)
        }
    }
}

/// Parses `args`, runs, reports errors on stderr and returns the exit code.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(&cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
