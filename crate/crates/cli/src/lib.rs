//! `ashplus` command-line driver.

use std::ffi::OsString;
use std::path::PathBuf;

use ashplus_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod layout;
mod report;

pub use layout::{MANIFEST_FILE, RESOLVED_FILE};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const INGESTION: i32 = 4;
    pub const RUNTIME: i32 = 5;
}

#[derive(Debug, Parser)]
#[command(name = "ashplus", version, about = "Adversarial semantic style hallucination for domain-generalized segmentation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Training configuration (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Dataset root written by `gen-data`.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Style image directory; defaults to `<data>/styles`.
    #[arg(long, global = true)]
    pub style_pool: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Device::Cpu)]
    pub device: Device,
    /// Evaluation threads; training always runs on one thread.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Forces a single worker.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Cpu,
    Accel,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic source domain, shifted targets and a style pool.
    GenData(GenDataArgs),
    /// Fit the frozen encoder/decoder pair.
    PretrainAe,
    /// Train the segmenter on source images only.
    TrainSource,
    /// Train with uniform (class-agnostic) style hallucination.
    TrainUniform(AeArgs),
    /// Train with adversarial semantic hallucination.
    TrainAshplus(AeArgs),
    /// Run the five-row component ablation.
    Ablate(AeArgs),
    /// Sweep the blend weights over a named grid.
    SweepSigma(SweepArgs),
    /// Evaluate a checkpoint on every target domain.
    Eval(CheckpointArgs),
    /// Stylization difference per conditioning class.
    AnalyzeClasswise(ClasswiseArgs),
    /// Sample penultimate-layer features with their labels.
    DumpFeatures(DumpArgs),
    /// Render comparison figures and a summary from run directories.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    /// `default` or a TOML domain description.
    #[arg(long, default_value = "default")]
    pub spec: String,
    #[arg(long, default_value_t = 5)]
    pub targets: usize,
    /// Style shift of the farthest target, in [0, 1].
    #[arg(long, default_value_t = 1.0)]
    pub shift: f64,
    #[arg(long, default_value_t = 200)]
    pub num_source: usize,
    #[arg(long, default_value_t = 40)]
    pub num_target: usize,
    #[arg(long, default_value_t = 50)]
    pub num_styles: usize,
}

#[derive(Debug, Clone, Args)]
pub struct AeArgs {
    /// Pretrained autoencoder checkpoint; pretrained on the fly when absent.
    #[arg(long)]
    pub ae: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub ae: AeArgs,
    /// `synthia-default` (4 complementary pairs) or `gta5-default` (8 pairs).
    #[arg(long, default_value = "synthia-default")]
    pub grid: String,
}

#[derive(Debug, Clone, Args)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ClasswiseArgs {
    #[command(flatten)]
    pub ckpt: CheckpointArgs,
    /// Index of the source image to stylize.
    #[arg(long, default_value_t = 0)]
    pub image: usize,
    /// Index of the style image.
    #[arg(long, default_value_t = 0)]
    pub style: usize,
}

#[derive(Debug, Clone, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub ckpt: CheckpointArgs,
    #[arg(long, default_value_t = 10_000)]
    pub pixels: usize,
    #[arg(long, default_value_t = 40)]
    pub images: usize,
    /// `source` or a target domain name.
    #[arg(long, default_value = "source")]
    pub domain: String,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run directories containing `summary.toml`.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
}

/// A failure mapped to its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: exit::CONFIG,
            message: message.into(),
        }
    }

    pub fn ingestion(message: impl Into<String>) -> Self {
        Self {
            code: exit::INGESTION,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: exit::RUNTIME,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidLabel { .. } => exit::CONFIG,
            Error::Ingestion { .. } | Error::EmptyDataset(_) | Error::Checkpoint(_) | Error::Io { .. } => exit::INGESTION,
            Error::InvalidInput(_) | Error::Shape(_) | Error::Degenerate(_) => exit::RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
