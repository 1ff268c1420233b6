//! `fined`: train, prune, run and evaluate FINED edge detectors.

mod commands;
mod viz;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fined_core::{Mode, Variant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] fined_core::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(fined_core::Error::UnknownLayer { .. }) => 2,
            CliError::Core(_) | CliError::Failed(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "fined",
    version,
    about = "Fast edge detection with lightweight networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network on a dataset manifest.
    Train(TrainArgs),
    /// Predict edge maps for an image or a directory of images.
    Infer(InferArgs),
    /// Strip the training helpers from a weight file.
    Prune(PruneArgs),
    /// Compute ODS/OIS and precision-recall curves.
    Eval(EvalArgs),
    /// Print parameter counts against the published sizes.
    Params(ParamsArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Render activations and first-layer filters as image grids.
    Viz(VizArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Train,
    Inf,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Train => Mode::Train,
            ModeArg::Inf => Mode::Inference,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    /// N(0, 0.01²) weights.
    Gauss,
    He,
    /// Role-dependent fan-in scaling with zero output heads.
    Fan,
}

#[derive(Args, Debug, Clone)]
pub struct NetArgs {
    /// Network family: fined2, fined3 or fined3-vgg.
    #[arg(long, default_value = "fined2")]
    pub spec: Variant,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Tab-separated manifest: `image<TAB>gt[,gt…]` per line.
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    /// Initial learning rate; divided by 10 every 10 epochs.
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 3)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    /// Clip each batch gradient to this global L2 norm.
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long, value_enum, default_value_t = InitArg::Gauss)]
    pub init: InitArg,
    /// Expand the dataset with flips, quarter turns and rescaling (24×).
    #[arg(long)]
    pub augment: bool,
    /// Output weight file. The loss log goes next to it as `<stem>.loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub net: NetArgs,
    /// Image file or directory of PNG/PGM/PPM images.
    #[arg(long)]
    pub input: PathBuf,
    /// Comma-separated input scales whose predictions are averaged.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub scales: Vec<f64>,
    /// Shorthand for `--scales 0.5,1,1.5`.
    #[arg(long, conflicts_with = "scales")]
    pub multiscale: bool,
    /// Thin the maps with non-maximum suppression.
    #[arg(long)]
    pub nms: bool,
    /// Output directory; one 16-bit PNG per input.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Tab-separated manifest: `prediction<TAB>gt[,gt…]` per line.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Matching radius as a fraction of the image diagonal.
    #[arg(long, default_value_t = fined_core::evaluation::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Number of evenly spaced thresholds in (0, 1).
    #[arg(long, default_value_t = 99)]
    pub thresholds: usize,
    /// Evaluate the maps as given, without thinning them first.
    #[arg(long)]
    pub no_nms: bool,
    /// Use greedy nearest-first matching instead of maximum matching.
    #[arg(long)]
    pub greedy: bool,
    /// Output directory for `summary.json`, `pr.csv` and `pr.svg`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    /// Count a weight file instead of a freshly built network.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long, value_enum, default_value_t = ModeArg::Inf)]
    pub mode: ModeArg,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long, value_enum, default_value_t = ModeArg::Train)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Side length of the random input image.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Comma-separated parameter names to leave unchecked.
    #[arg(long, value_delimiter = ',')]
    pub freeze: Vec<String>,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long, value_enum, default_value_t = ModeArg::Inf)]
    pub mode: ModeArg,
    #[arg(long)]
    pub image: PathBuf,
    /// Layer whose output to render, for example `conv1_1`.
    #[arg(long)]
    pub layer: String,
    /// Render at most this many channels.
    #[arg(long, default_value_t = 64)]
    pub max_maps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("FINED_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!(
            "FINED_THREADS must be a positive integer, got `{v}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let res = configure_threads().and_then(|_| match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Prune(a) => commands::prune(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Params(a) => commands::params(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Viz(a) => viz::run(&a),
    });
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
