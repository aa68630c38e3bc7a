//! Command-line driver for the afca-core pipelines.
//!
//! Four subcommands share one JSON run configuration and one output
//! directory: `demo-forward` traces the attention aggregation and checks
//! its invariances, `train-toy` runs the two-stage training loop on a
//! synthetic corpus, `curate` filters an NDJSON clip listing, and `eval`
//! scores a landmark corpus.
//!
//! Primary outputs are byte-deterministic for a fixed seed; wall-clock
//! metadata lives only in the `run_meta.json` sidecar. `AFCA_LAB_THREADS`
//! caps worker parallelism; the numeric kernels here are single-threaded,
//! which satisfies any cap, and the value is recorded in the sidecar.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod config;
pub mod output;

mod commands {
    pub mod curate;
    pub mod demo;
    pub mod eval;
    pub mod train;
}

use config::{load_config, RunConfig};

/// Everything ran and passed.
pub const EXIT_OK: u8 = 0;
/// The run completed but rejected or skipped part of its input.
pub const EXIT_PARTIAL: u8 = 1;
/// Unreadable or unwritable files, or malformed formats.
pub const EXIT_IO: u8 = 2;
/// An attention invariance check failed.
pub const EXIT_INVARIANCE: u8 = 3;
/// Training or evaluation produced non-finite numbers.
pub const EXIT_NUMERIC: u8 = 4;
/// A configuration or data contract was violated.
pub const EXIT_CONTRACT: u8 = 5;

#[derive(Debug, Parser)]
#[command(name = "afca-lab", version, about = "Attention, training, curation, and metric pipelines at desk scale")]
pub struct Cli {
    /// JSON run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root seed, overriding the config value.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Directory all artifacts are written into.
    #[arg(long, global = true, value_name = "DIR", default_value = "afca-lab-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trace per-identity attention contributions and check invariances
    DemoForward {
        /// Checkpoint directory to load weights from instead of seeding them.
        #[arg(long, value_name = "DIR")]
        weights: Option<PathBuf>,
    },
    /// Run two-stage denoising training on a synthetic corpus
    TrainToy {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Skip stage one and train on paired batches only.
        #[arg(long)]
        stage2_only: bool,
    },
    /// Filter an NDJSON clip listing and audit every clip
    Curate {
        /// Newline-delimited JSON clip metadata.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
    },
    /// Score a landmark corpus directory
    Eval {
        /// Directory of annotation, landmark, and sync files.
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        /// Also write per-clip motion-over-time tables.
        #[arg(long)]
        plot: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::DemoForward { .. } => "demo-forward",
            Command::TrainToy { .. } => "train-toy",
            Command::Curate { .. } => "curate",
            Command::Eval { .. } => "eval",
        }
    }
}

pub(crate) fn fail(code: u8, msg: impl AsRef<str>) -> u8 {
    eprintln!("afca-lab: {}", msg.as_ref());
    code
}

/// Parallelism cap from the environment; `None` means uncapped.
fn threads_cap() -> Result<Option<usize>, String> {
    match std::env::var("AFCA_LAB_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(format!("AFCA_LAB_THREADS must be a positive integer, got '{v}'")),
        },
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(format!("AFCA_LAB_THREADS: {e}")),
    }
}

/// Dispatch a parsed invocation and return its process exit code.
pub fn run(cli: Cli) -> u8 {
    let threads = match threads_cap() {
        Ok(t) => t,
        Err(m) => return fail(EXIT_IO, m),
    };
    let mut cfg = match &cli.config {
        Some(path) => match load_config(path) {
            Ok(c) => c,
            Err(m) => return fail(EXIT_IO, m),
        },
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Command::TrainToy { stage2_only: true, .. } = cli.command {
        cfg.toy.stage1_steps = 0;
    }
    if let Err(m) = cfg.validate() {
        return fail(EXIT_CONTRACT, m);
    }
    if let Err(e) = std::fs::create_dir_all(&cli.out) {
        return fail(EXIT_IO, format!("cannot create {}: {e}", cli.out.display()));
    }
    // Every run echoes the configuration it actually used.
    if let Err(m) = output::write_json(&cli.out.join("effective_config.json"), &cfg) {
        return fail(EXIT_IO, m);
    }
    if let Err(m) = output::write_run_meta(&cli.out, cli.command.name(), threads) {
        return fail(EXIT_IO, m);
    }
    match &cli.command {
        Command::DemoForward { weights } => commands::demo::run(&cfg, &cli.out, weights.as_deref()),
        Command::TrainToy { resume, .. } => commands::train::run(&cfg, &cli.out, *resume),
        Command::Curate { input } => commands::curate::run(&cfg, &cli.out, input),
        Command::Eval { corpus, plot } => commands::eval::run(&cfg, &cli.out, corpus, *plot),
    }
}
