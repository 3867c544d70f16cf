//! The `gdm` command line: generate, train, eval, predict and convert.
//!
//! Every command writes plain files (CSV tables, JSON checkpoints and
//! manifests) and never touches its inputs. Failures surface as one
//! `error: ...` line with a nonzero exit code.

mod commands;
mod data;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{convert, eval, generate_nascar, predict, train};

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Bad flags or flag values.
    Usage(String),
    /// The command ran and failed.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            CliError::Usage(m) | CliError::Failed(m) => m,
        };
        let one_line: Vec<&str> = msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        f.write_str(&one_line.join("; "))
    }
}

impl std::error::Error for CliError {}

impl From<gdm::GdmError> for CliError {
    fn from(e: gdm::GdmError) -> Self {
        CliError::Failed(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "gdm", version, about = "Gumbel dynamical models: simulate, fit and evaluate relaxed switching dynamics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a synthetic dataset.
    Generate {
        #[command(subcommand)]
        dataset: Dataset,
    },
    /// Fit a model and its amortized posterior.
    Train(TrainArgs),
    /// Smoothing R^2, inferred state accuracy and state usage.
    Eval(EvalArgs),
    /// Multi-step prediction envelopes.
    Predict(PredictArgs),
    /// Convert a checkpoint between the two-level and three-level forms.
    Convert(ConvertArgs),
}

#[derive(Debug, Subcommand)]
pub enum Dataset {
    /// Cars on a two-straightaway, two-turn track.
    Nascar(NascarArgs),
}

#[derive(Debug, Args)]
pub struct NascarArgs {
    /// standard or soft-sticky
    #[arg(long, default_value = "standard")]
    pub variant: String,
    #[arg(long = "T", default_value_t = 1000)]
    pub t_len: usize,
    /// Number of states; the track has exactly 4.
    #[arg(long = "K", default_value_t = 4)]
    pub k: usize,
    #[arg(long, env = "GDM_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub trials: usize,
    /// Observation dimension.
    #[arg(long, default_value_t = 10)]
    pub n_obs: usize,
    /// Observation noise standard deviation.
    #[arg(long, default_value_t = 0.05)]
    pub obs_noise: f64,
    /// Lower end of the random speed range; 1 keeps the speed fixed.
    #[arg(long, default_value_t = 1.0)]
    pub min_speed: f64,
    /// Seed of the random emission shared by all trials.
    #[arg(long, default_value_t = 0)]
    pub emission_seed: u64,
    /// Generator temperature (default depends on the variant).
    #[arg(long)]
    pub temp: Option<f64>,
    /// Soft-sticky logit scale.
    #[arg(long)]
    pub softness: Option<f64>,
    /// Soft-sticky weight of the previous state.
    #[arg(long)]
    pub stickiness: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// How data CSVs are read.
#[derive(Debug, Args, Clone, Default)]
pub struct SchemaArgs {
    /// Comma-separated label names; label i is the i-th name.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    #[arg(long, default_value = "label")]
    pub label_column: String,
    #[arg(long, default_value = "t")]
    pub time_column: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training CSVs; glob patterns are expanded. Repeatable.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<String>,
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long = "D")]
    pub d: Option<usize>,
    /// linear, sticky-linear or recurrent
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub temp: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, env = "GDM_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Relaxed samples per ELBO estimate.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub clip: Option<f64>,
    /// Save the checkpoint every this many steps.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Centre and scale each coordinate with statistics of the training data.
    #[arg(long)]
    pub standardize: bool,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace CSV (default: the checkpoint path with `.trace.csv`).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub schema: SchemaArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub train_data: Vec<String>,
    #[arg(long, required = true, num_args = 1..)]
    pub test_data: Vec<String>,
    #[arg(long, default_value_t = gdm::evalpred::DEFAULT_KNN)]
    pub knn_k: usize,
    #[arg(long, env = "GDM_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Posterior draws averaged for smoothing.
    #[arg(long, default_value_t = 1)]
    pub draws: usize,
    /// State weight counted as present in the usage table.
    #[arg(long, default_value_t = 0.01)]
    pub presence: f64,
    /// Fraction of a class's steps a state must be present in.
    #[arg(long, default_value_t = 0.2)]
    pub coverage: f64,
    /// Output directory.
    #[arg(long, default_value = "gdm-eval")]
    pub out: PathBuf,
    #[command(flatten)]
    pub schema: SchemaArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// One data CSV.
    #[arg(long)]
    pub data: String,
    #[arg(long, default_value_t = 1)]
    pub horizon: usize,
    #[arg(long, default_value_t = gdm::evalpred::DEFAULT_ROLLOUTS)]
    pub rollouts: usize,
    #[arg(long, env = "GDM_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Band half-width in standard deviations for the coverage summary.
    #[arg(long, default_value_t = 3.0)]
    pub width: f64,
    /// Envelope CSV.
    #[arg(long, default_value = "envelope.csv")]
    pub out: PathBuf,
    /// Optional metrics CSV with coverage and mean width per step.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub schema: SchemaArgs,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return Err(CliError::usage(first.trim_start_matches("error: ")));
        }
    };
    match cli.command {
        Command::Generate {
            dataset: Dataset::Nascar(a),
        } => generate_nascar(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Predict(a) => predict(&a),
        Command::Convert(a) => convert(&a),
    }
}
