//! The `milpath` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
//! Log verbosity comes from `MILPATH_LOG` (`error`, `warn`, `info`, `debug`).

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use milpath::bagio::LabelLevel;
use milpath::milnet::MilMode;

mod commands;
pub mod config;

pub use config::ExperimentConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] milpath::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_data_error() => EXIT_DATA,
            CliError::Core(_) | CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Config(_) | CliError::Data(_) => EXIT_DATA,
            CliError::Usage(_) => EXIT_USAGE,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "milpath", version, about = "Attention-based multiple-instance learning on whole-slide feature bags")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment tissue in a raster image and write its patch grid
    Tile(TileArgs),
    /// Generate a synthetic cohort with known signal instances
    Synth(SynthArgs),
    /// Train one model on a single stratified split
    Train(TrainArgs),
    /// Repeated resplit-and-retrain evaluation with confidence intervals
    Bootstrap(BootstrapArgs),
    /// Train on some sites and test on the held-out sites
    Holdout(HoldoutArgs),
    /// Paired permutation test between two bootstrap reports
    Permtest(PermtestArgs),
    /// Render attention heatmaps for one bag
    Heatmap(HeatmapArgs),
    /// Check a manifest and its bags and print the curation report
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct TileArgs {
    /// Input raster image (PNG, TIFF or BMP)
    #[arg(long)]
    pub image: PathBuf,
    /// Output directory for grid.json and mask.png
    #[arg(long)]
    pub out: PathBuf,
    /// Patch edge length in level-0 pixels
    #[arg(long, default_value_t = milpath::tiler::DEFAULT_PATCH_SIZE)]
    pub patch_size: u32,
    /// Downsample factor used for segmentation
    #[arg(long, default_value_t = 16)]
    pub downsample: u32,
    /// Minimum tissue fraction for a patch to be kept
    #[arg(long, default_value_t = milpath::tiler::DEFAULT_MIN_TISSUE_FRACTION)]
    pub min_tissue: f64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for manifest.json, bags/ and signal.json
    #[arg(long)]
    pub out: PathBuf,
    /// Number of classes
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Cases per class
    #[arg(long, default_value_t = 20)]
    pub cases: usize,
    /// Feature dimension
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Distance of each class signal mean from the background mean, in noise units
    #[arg(long, default_value_t = 6.0)]
    pub separation: f64,
    /// Fraction of each bag drawn from its class signal distribution
    #[arg(long, default_value_t = 0.2)]
    pub signal_fraction: f64,
    /// Standard deviation of the Gaussian noise
    #[arg(long, default_value_t = 1.0)]
    pub noise_scale: f64,
    /// Smallest bag size
    #[arg(long, default_value_t = 24)]
    pub bag_min: usize,
    /// Largest bag size
    #[arg(long, default_value_t = 48)]
    pub bag_max: usize,
    /// Comma-separated site names, assigned round-robin
    #[arg(long, value_delimiter = ',', default_value = "A,B,C,D")]
    pub sites: Vec<String>,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Flags shared by the commands that read an experiment config.
#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment config file (JSON)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cohort manifest (overrides the config)
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Base directory of bag paths (overrides the config)
    #[arg(long)]
    pub bag_dir: Option<PathBuf>,
    /// Output directory (overrides the config)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Random seed (overrides the config)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Label level of the task (overrides the config)
    #[arg(long, value_enum)]
    pub level: Option<Level>,
    /// Model type (overrides the config)
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Curation threshold in cases per class (overrides the config)
    #[arg(long)]
    pub min_cases: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
}

#[derive(Debug, Args)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Number of replicates (overrides the config)
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Replicate worker pool width [default: available parallelism]
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct HoldoutArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Comma-separated training sites (overrides the config)
    #[arg(long, value_delimiter = ',')]
    pub train_sites: Option<Vec<String>>,
    /// Number of replicates (overrides the config)
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Replicate worker pool width [default: available parallelism]
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PermtestArgs {
    /// First bootstrap report (JSON), or a JSON array of per-replicate values
    #[arg(long)]
    pub a: PathBuf,
    /// Second bootstrap report, paired with the first by replicate id
    #[arg(long)]
    pub b: PathBuf,
    /// Metric to compare
    #[arg(long, value_enum, default_value_t = Metric::Mcc)]
    pub metric: Metric,
    /// Number of comparisons for the Bonferroni correction
    #[arg(long, default_value_t = 1)]
    pub comparisons: usize,
    /// Number of random sign-flip permutations
    #[arg(long, default_value_t = milpath::evalstat::DEFAULT_PERMUTATIONS)]
    pub permutations: usize,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the result to this JSON file
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    /// Model checkpoint
    #[arg(long)]
    pub model: PathBuf,
    /// Feature bag (FBAG) of the case
    #[arg(long)]
    pub bag: PathBuf,
    /// Output directory for overlay.json and the PNG maps
    #[arg(long)]
    pub out: PathBuf,
    /// Base image of one slide to blend over; without it maps are drawn on white
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Slide index the base image belongs to
    #[arg(long, default_value_t = 0)]
    pub slide: u16,
    /// Level-0 pixels per output pixel
    #[arg(long, default_value_t = 1)]
    pub downsample: u32,
    /// Overlay opacity in [0, 1]
    #[arg(long, default_value_t = milpath::heatmap::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Per-slide score normalization
    #[arg(long, value_enum, default_value_t = Norm::Minmax)]
    pub normalization: Norm,
    /// Annotation polygons (JSON) drawn as outlines
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Patch edge length in level-0 pixels
    #[arg(long, default_value_t = milpath::tiler::DEFAULT_PATCH_SIZE)]
    pub patch_size: u32,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Cohort manifest
    #[arg(long)]
    pub manifest: PathBuf,
    /// Base directory of bag paths [default: the manifest's directory]
    #[arg(long)]
    pub bag_dir: Option<PathBuf>,
    /// Label level to curate at
    #[arg(long, value_enum, default_value_t = Level::Category)]
    pub level: Level,
    /// Curation threshold in cases per class
    #[arg(long, default_value_t = config::DEFAULT_MIN_CASES)]
    pub min_cases: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Level {
    Category,
    Family,
    Type,
}

impl From<Level> for LabelLevel {
    fn from(l: Level) -> Self {
        match l {
            Level::Category => LabelLevel::Category,
            Level::Family => LabelLevel::Family,
            Level::Type => LabelLevel::Type,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Abmil,
    Clam,
}

impl From<Mode> for MilMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Abmil => MilMode::Abmil,
            Mode::Clam => MilMode::Clam,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Mcc,
    BalancedAccuracy,
    WeightedF1,
    Auroc,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Mcc => "mcc",
            Metric::BalancedAccuracy => "balanced_accuracy",
            Metric::WeightedF1 => "weighted_f1",
            Metric::Auroc => "auroc_macro_ovr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Norm {
    Minmax,
    Percentile,
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("MILPATH_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
