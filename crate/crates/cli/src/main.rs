mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use aarr_core::eval::Averaging;
use aarr_core::trainer::ModelChoice;
use aarr_core::Error;

#[derive(Parser)]
#[command(name = "aarr", version, about = "Attribute-aware representation rectification for GZSL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train a model and write per-epoch checkpoints and history.csv.
    Train(TrainArgs),
    /// Score a checkpoint on the test splits.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of every loss.
    Gradcheck(GradcheckArgs),
    /// Export attribute-region attention and region weights as CSV.
    Attention(AttentionArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Student,
    Teacher,
}

impl From<ModelArg> for ModelChoice {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Student => ModelChoice::Student,
            ModelArg::Teacher => ModelChoice::Teacher,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_seen: Option<usize>,
    #[arg(long)]
    k_unseen: Option<usize>,
    /// Number of attributes.
    #[arg(long)]
    attributes: Option<usize>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    raw_dim: Option<usize>,
    #[arg(long)]
    regions: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Nearest seen classes per unseen class.
    #[arg(long)]
    m: Option<usize>,
    /// Teacher EMA decay.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    no_uad: bool,
    #[arg(long)]
    no_agl: bool,
    /// Batch prototypes as plain sums of region features.
    #[arg(long)]
    literal_eq8: bool,
    /// Model scored after each epoch.
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Average accuracy over samples instead of classes (diagnostic).
    #[arg(long)]
    per_sample: bool,
    #[arg(long)]
    no_invariant_checks: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory (latest epoch) or a single epoch directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the model scored during training.
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long)]
    per_sample: bool,
    /// Where metrics.json and metrics.csv go; defaults to the epoch directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct AttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated sample indices.
    #[arg(long, value_delimiter = ',', required = true)]
    samples: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "student")]
    model: ModelArg,
}

/// Why a command stopped.
pub enum Failure {
    Core(Error),
    Usage(String),
    /// Gradient check ran but a term exceeded the tolerance.
    GradientMismatch,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Usage(_) => 2,
        Failure::GradientMismatch => 3,
        Failure::Core(e) => match e {
            Error::Config(_) | Error::Contract(_) | Error::Generation(_) => 2,
            Error::NonFinite { .. } | Error::Invariant(_) => 3,
            Error::Format { .. } | Error::Io { .. } | Error::Json { .. } | Error::Dimension { .. } => 4,
        },
    }
}

fn averaging(per_sample: bool) -> Option<Averaging> {
    per_sample.then_some(Averaging::PerSample)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Attention(a) => commands::attention(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Core(e) => eprintln!("error: {e}"),
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::GradientMismatch => eprintln!("error: gradient check failed"),
            }
            ExitCode::from(exit_code(&f))
        }
    }
}
