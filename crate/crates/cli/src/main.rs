//! `hat`: train, attack and evaluate speaker classifiers from a config file.

mod commands;
mod failure;
mod lock;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Hybrid adversarial training experiments.
#[derive(Debug, Parser)]
#[command(name = "hat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every config-driven subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Config file, or the name of a shipped preset such as `desk-hat`.
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override a config value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Global seed (same as `--set seed=N`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (same as `--set out=DIR`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Leave timestamps and wall times out of artifacts so reruns compare
    /// byte for byte.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a config and list violations and warnings.
    Validate(Common),
    /// Train a model and write checkpoints and a training log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write adversarial audio and SNR statistics for one attack.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Model to attack; defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `FGSM`, `PGD10`, `CW40`, `FS10`, `HYB10`, ... at `eval.epsilon`.
        #[arg(long, default_value = "PGD10")]
        attack: String,
        /// Write WAV files for at most this many utterances.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Evaluate a checkpoint and write a robustness report.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model to evaluate; defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write epsilon and iteration sweeps as CSV.
        #[arg(long)]
        sweeps: bool,
        /// Also run the gradient-masking checks with adversaries transferred
        /// from this checkpoint.
        #[arg(long, value_name = "SOURCE_CKPT")]
        masking: Option<PathBuf>,
    },
    /// Train one HAT model per loss combination and compare them.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Attacks scored for each model.
        #[arg(long, value_delimiter = ',', default_value = "PGD10,CW10")]
        attacks: Vec<String>,
    },
    /// Render one table from several report files.
    Report {
        /// `report.jsonl` files written by `eval`.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Write the table here as well as to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate(common) => commands::validate(&common),
        Command::Train { common, resume } => commands::train(&common, resume.as_deref()),
        Command::Attack {
            common,
            checkpoint,
            attack,
            limit,
        } => commands::attack(&common, checkpoint.as_deref(), &attack, limit),
        Command::Eval {
            common,
            checkpoint,
            sweeps,
            masking,
        } => commands::eval(&common, checkpoint.as_deref(), sweeps, masking.as_deref()),
        Command::Ablate { common, attacks } => commands::ablate(&common, &attacks),
        Command::Report { reports, output } => commands::report(&reports, output.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
