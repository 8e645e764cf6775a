//! Command-line front end for the emosim harness.

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use emosim_core::config::ConfigError;
use emosim_core::eval::MuScope;
use emosim_core::pipeline::TaskSelector;
use emosim_core::{CalibrationMode, Dimension, Error, LayerSelector, ScenarioKind, Threshold};

pub mod commands;
pub mod server;

#[derive(Debug, Parser)]
#[command(
    name = "emosim",
    version,
    about = "Stress tests for embedding-based emotion similarity"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a manifest and, optionally, its embedding coverage.
    Ingest(IngestArgs),
    /// Compute and store the partition mean; report anisotropy before and after.
    Calibrate(CalibrateArgs),
    /// Draw evaluation instances and write them as JSONL.
    Sample(SampleArgs),
    /// Sample (or replay) instances and score one model layer.
    Eval(EvalArgs),
    /// Score one task across several layers on a shared instance set.
    ProbeLayers(ProbeArgs),
    /// Consensus-filter human votes and score metric alignment.
    AlignHuman(AlignArgs),
    /// Run the annotation server.
    Serve(ServeArgs),
    /// Re-render tables from persisted results.
    Report(ReportArgs),
    /// Run every job described by a TOML run config.
    Run(RunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskFamily {
    Categorical,
    Shift,
    Monotonicity,
}

/// Which task(s) to run.
#[derive(Debug, Clone, Args)]
pub struct TaskArgs {
    pub task: TaskFamily,
    /// Categorical scenario; all four when omitted.
    #[arg(long)]
    pub scenario: Option<ScenarioKind>,
    /// Affective dimension for shift and monotonicity.
    #[arg(long)]
    pub dimension: Option<Dimension>,
    /// Also hold the emotion label fixed for valence tasks.
    #[arg(long)]
    pub fix_emotion: bool,
}

impl TaskArgs {
    pub fn selector(&self) -> Result<TaskSelector, Error> {
        match (self.task, self.scenario, self.dimension) {
            (TaskFamily::Categorical, s, None) => Ok(TaskSelector::Categorical(s)),
            (TaskFamily::Shift, None, Some(d)) => Ok(TaskSelector::Shift(d)),
            (TaskFamily::Monotonicity, None, Some(d)) => Ok(TaskSelector::Monotonicity(d)),
            (TaskFamily::Categorical, _, Some(_)) => Err(usage("--dimension does not apply to categorical tasks")),
            (_, Some(_), _) => Err(usage("--scenario applies only to categorical tasks")),
            (_, None, None) => Err(usage("--dimension is required for shift and monotonicity")),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SamplingArgs {
    #[arg(long, default_value_t = 5)]
    pub runs: u32,
    /// Instances per run [default: 1000, or 500 for speaker_linguistic_match].
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ManifestArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Harness config (label map, zero-shot table); the bundled one by default.
    #[arg(long)]
    pub harness_config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrationArgs {
    #[arg(long, default_value_t = CalibrationMode::Centered)]
    pub calibration: CalibrationMode,
    /// Population for the mean: the whole partition or only sampled ids.
    #[arg(long, default_value_t = MuScope::Partition)]
    pub mu_scope: MuScope,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub data: ManifestArgs,
    #[arg(long, requires = "model")]
    pub embeddings_dir: Option<PathBuf>,
    #[arg(long, requires = "embeddings_dir")]
    pub model: Option<String>,
    /// Layers to check: a comma list, `all` or `last` [default: all].
    #[arg(long)]
    pub layers: Option<String>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub data: ManifestArgs,
    #[arg(long)]
    pub embeddings_dir: PathBuf,
    #[arg(long)]
    pub model: String,
    /// A comma list, `all` or `last`.
    #[arg(long, default_value = "last")]
    pub layers: String,
    /// Random pairs for the anisotropy summary.
    #[arg(long, default_value_t = 1000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub data: ManifestArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub data: ManifestArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[command(flatten)]
    pub calibration: CalibrationArgs,
    #[arg(long)]
    pub embeddings_dir: PathBuf,
    #[arg(long)]
    pub model: String,
    /// One layer index or `last`.
    #[arg(long, default_value = "last")]
    pub layers: LayerSelector,
    /// Replay instances written by `sample` instead of drawing new ones.
    #[arg(long)]
    pub from: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub data: ManifestArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[command(flatten)]
    pub calibration: CalibrationArgs,
    #[arg(long)]
    pub embeddings_dir: PathBuf,
    #[arg(long)]
    pub model: String,
    /// A comma list or `all`.
    #[arg(long, default_value = "all")]
    pub layers: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// Preference triplets, one JSON object per line.
    #[arg(long)]
    pub pool: PathBuf,
    /// Annotation log written by `serve`.
    #[arg(long)]
    pub votes: PathBuf,
    #[arg(long)]
    pub embeddings_dir: PathBuf,
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value = "last")]
    pub layers: LayerSelector,
    #[arg(long, default_value_t = 5)]
    pub raters: usize,
    #[arg(long, default_value = "4/5")]
    pub threshold: Threshold,
    /// Keep this many consensus triplets per source dataset.
    #[arg(long)]
    pub per_source: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = CalibrationMode::Centered)]
    pub calibration: CalibrationMode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub pool: PathBuf,
    /// Audio lives at `<media-root>/<audio_path>` or `<media-root>/<id>.wav`.
    #[arg(long)]
    pub media_root: PathBuf,
    /// Manifests supplying audio_path for pool utterances.
    #[arg(long)]
    pub manifest: Vec<PathBuf>,
    #[arg(long)]
    pub harness_config: Option<PathBuf>,
    /// Append-only log; replayed on start when it exists.
    #[arg(long)]
    pub log: PathBuf,
    /// Comma-separated rater ids.
    #[arg(long, value_delimiter = ',', required = true)]
    pub raters: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "4/5")]
    pub threshold: Threshold,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum LayoutArg {
    #[default]
    Models,
    Layers,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `results.jsonl` files to combine.
    #[arg(long, required_unless_present = "tsv")]
    pub results: Vec<PathBuf>,
    /// `exclusions.jsonl` files; excluded cells render as dashes.
    #[arg(long)]
    pub exclusions: Vec<PathBuf>,
    /// Re-render the text table of an existing TSV to stdout.
    #[arg(long, conflicts_with = "results")]
    pub tsv: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub layout: LayoutArg,
    #[arg(long, required_unless_present = "tsv")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
}

pub(crate) fn usage(message: impl Into<String>) -> Error {
    Error::Config(ConfigError::Invalid(message.into()))
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match commands::execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.class().exit_code()
        }
    }
}
