//! `pvt`: command-line driver for training, detection, enrollment,
//! scoring and evaluation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pvt_core::Error;

#[derive(Debug, Parser)]
#[command(name = "pvt", version, about = "Personalized voice trigger toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; every field has a default.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the seeds in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-speaker corpus with manifests and trials.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        speakers: usize,
        /// Positive training utterances per speaker.
        #[arg(long, default_value_t = 8)]
        train_positive: usize,
        /// Negative training utterances per speaker.
        #[arg(long, default_value_t = 16)]
        train_negative: usize,
    },
    /// Compute fbank features for every manifest entry.
    Features {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "JSONL")]
        manifest: PathBuf,
    },
    /// Train the keyword model.
    TrainKws {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "JSONL")]
        manifest: PathBuf,
    },
    /// Train the speaker-verification model.
    TrainSv {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "JSONL")]
        manifest: PathBuf,
    },
    /// Freeze-then-finetune a trained speaker model on new data.
    FinetuneSv {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PVTK")]
        model: PathBuf,
        #[arg(long, value_name = "JSONL")]
        manifest: PathBuf,
    },
    /// Run the keyword detector and write trigger events as JSON Lines.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PVTK")]
        model: PathBuf,
        #[arg(long, value_name = "JSONL")]
        manifest: PathBuf,
    },
    /// Build speaker profiles from enrollment utterances.
    Enroll {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PVTK")]
        model: PathBuf,
        #[arg(long, value_name = "JSONL")]
        manifest: PathBuf,
    },
    /// Score trials through the detector and one or more speaker systems.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PVTK")]
        kws: PathBuf,
        /// Speaker model; repeat for score fusion.
        #[arg(long, value_name = "PVTK", required = true)]
        sv: Vec<PathBuf>,
        /// Profiles for each `--sv`, in the same order.
        #[arg(long, value_name = "PVTK", required = true)]
        profiles: Vec<PathBuf>,
        #[arg(long, value_name = "TXT")]
        trials: PathBuf,
        /// Manifest of the test utterances.
        #[arg(long, value_name = "JSONL")]
        manifest: PathBuf,
    },
    /// Compute the DET sweep and detection-cost report from scores.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "TXT")]
        trials: PathBuf,
        /// Score file; defaults to `scores.txt` in the output directory.
        #[arg(long, value_name = "TXT")]
        scores: Option<PathBuf>,
        /// Cost report of a development set whose threshold to transfer.
        #[arg(long, value_name = "JSON")]
        dev_report: Option<PathBuf>,
    },
    /// Measure real-time factors of the two stages.
    Rtf {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PVTK")]
        kws: PathBuf,
        #[arg(long, value_name = "PVTK")]
        sv: PathBuf,
        #[arg(long, value_name = "JSONL")]
        manifest: PathBuf,
    },
}

/// Problems with the user's input rather than with running the job.
fn is_validation_error(e: &Error) -> bool {
    matches!(
        e,
        Error::InvalidConfig(_)
            | Error::InvalidArgument(_)
            | Error::Manifest { .. }
            | Error::ConfigMismatch { .. }
            | Error::MissingProfile(_)
    )
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("PVT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("PVT_THREADS={v:?} is not a positive integer"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_validation_error(&e) { 1 } else { 2 })
        }
    }
}
