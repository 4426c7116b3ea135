//! `mixtts`: prepare data, train, synthesize, invert spectrograms and
//! benchmark inversion from one binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use mixtts_core::inversion::{InversionConfig, InversionError};
use mixtts_core::model::ModelError;
use mixtts_core::trainer::TrainError;

#[derive(Parser, Debug)]
#[command(name = "mixtts", version, about = "Mixed character/phoneme text-to-speech")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a manifest and cache normalized records and log-mel features.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a prepared data directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for the log, resolved config and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Text to waveform through a trained checkpoint.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        /// chars, pwcb or mixed:SEED
        #[arg(long, default_value = "pwcb")]
        mode: InputMode,
        /// Pronunciations for pwcb and mixed modes.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the generated log-mel spectrogram here.
        #[arg(long)]
        mel_out: Option<PathBuf>,
        #[arg(long, default_value = "lbfgs+gl:100:100")]
        method: MethodArg,
        #[arg(long, default_value_t = 1000)]
        max_frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Log-mel file to waveform.
    Invert {
        #[arg(long)]
        mel: PathBuf,
        /// lbfgs:N, gl:N or lbfgs+gl:N:M
        #[arg(long, default_value = "lbfgs+gl:100:100")]
        method: MethodArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time inversion methods on a directory of WAV files (JSON lines on stdout).
    Bench {
        #[arg(long)]
        fixture: PathBuf,
        /// Comma-separated method strings; defaults to the published table rows.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<MethodArg>,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Inference-time text encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputMode {
    Chars,
    Pwcb,
    Mixed(u64),
}

impl FromStr for InputMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "chars" => Ok(Self::Chars),
            "pwcb" => Ok(Self::Pwcb),
            _ => s
                .strip_prefix("mixed:")
                .and_then(|n| n.parse().ok())
                .map(Self::Mixed)
                .ok_or_else(|| format!("expected chars, pwcb or mixed:SEED, got {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodArg(pub InversionConfig);

impl FromStr for MethodArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        InversionConfig::parse(s).map(Self).map_err(|e| e.to_string())
    }
}

/// A failure that should be reported as a usage error.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<InversionError>() {
            match e {
                InversionError::NonFiniteLoss => return 3,
                InversionError::BadMethod(_) => return 1,
                _ => {}
            }
        }
        if let Some(TrainError::NonFiniteLoss { .. }) = cause.downcast_ref::<TrainError>() {
            return 3;
        }
        if let Some(ModelError::NonFiniteFrame(_)) = cause.downcast_ref::<ModelError>() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
