//! `cdrift`: calibrate a conformal drift detector, self-check it, and score
//! model outputs for likely mispredictions.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

/// Exit status when the coverage self-check raises an alert.
const EXIT_ALERT: u8 = 3;
/// Exit status for input, configuration and artifact errors.
const EXIT_ERROR: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "cdrift",
    version,
    about = "Conformal misprediction and drift detector"
)]
struct Cli {
    /// Detector configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Calibration store artifact.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// Significance level override.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write results here instead of stdout.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a calibration store from labelled samples and model outputs.
    Calibrate {
        /// JSON Lines with id, features, label or target, and proba or pred.
        input: PathBuf,
        /// Model outputs joined by id, when the input carries none.
        #[arg(long)]
        outputs: Option<PathBuf>,
    },
    /// Run the coverage self-check on a store; exits 3 on alert.
    Check {
        /// Number of internal 80/20 splits.
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Assess test inputs and write one verdict line per input.
    Detect {
        /// JSON Lines with id, features and proba or pred.
        input: PathBuf,
    },
    /// Score assessments against ground truth.
    Evaluate {
        /// Output of `detect`.
        assessments: PathBuf,
        /// JSON Lines with id, label or target, and proba or pred.
        truth: PathBuf,
        /// Relative error at or above which a regression output is wrong.
        #[arg(long, default_value_t = 0.2)]
        threshold: f64,
    },
    /// Pick the flagged samples to relabel first.
    Triage {
        /// Output of `detect`.
        assessments: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        budget: f64,
    },
    /// Search detector parameters on a calibration file.
    GridSearch {
        input: PathBuf,
        #[arg(long, value_delimiter = ',')]
        epsilons: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        taus: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        fractions: Vec<f64>,
        #[arg(long = "gaussian-cs", value_delimiter = ',')]
        gaussian_cs: Vec<f64>,
    },
    /// Write the synthetic benchmark as JSON Lines files.
    Generate {
        /// Target directory.
        dir: PathBuf,
        #[arg(long, default_value_t = 5.0)]
        drift_shift: f64,
    },
    /// End-to-end run on the synthetic benchmark.
    Demo {
        #[arg(long, default_value_t = 5.0)]
        drift_shift: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(commands::Outcome::Ok) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Alert) => ExitCode::from(EXIT_ALERT),
        // downstream reader closed early, e.g. `cdrift detect ... | head`
        Err(conformal_drift::Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
