//! Command-line driver: train, evaluate, predict, gradient-check and ablate.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or data error, 3 checkpoint
//! does not match the requested architecture.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;
use wheelgat::dataset::Split;

pub use config::{RunConfig, Variant, KEYS};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) | CliError::Data(_) => 2,
            CliError::Mismatch(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "wheelgat",
    version,
    about = "Joint intent detection and slot filling with a wheel-graph attention network"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and keep the best validation checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Label tokenized utterances read one per line.
    Predict(PredictArgs),
    /// Compare analytic gradients of a tiny model with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and score the full model and four ablated variants.
    Ablate(AblateArgs),
}

/// Settings shared by every command that reads a configuration.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Directory holding the train/dev/test splits.
    #[arg(long, value_name = "PATH")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "N")]
    pub max_epochs: Option<usize>,
    /// Override one configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    /// Defaults, then the file, then `--set`, then dedicated flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            c.apply_text(o, "--set")?;
        }
        if let Some(d) = &self.data_dir {
            c.data_dir = Some(d.clone());
        }
        if let Some(s) = self.seed {
            c.train.seed = s;
        }
        if let Some(e) = self.max_epochs {
            c.train.max_epochs = e;
        }
        Ok(c)
    }

    /// True if anything beyond the defaults was requested.
    pub fn is_explicit(&self) -> bool {
        self.config.is_some() || !self.overrides.is_empty()
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_enum, default_value = "full")]
    pub variant: Variant,
    /// Where checkpoint.best, train.log, val.report and config.resolved go.
    #[arg(long, value_name = "PATH", default_value = "wheelgat-run")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "train|dev|test", default_value = "test")]
    pub split: Split,
    /// Report path; defaults to `<split>.report` next to the checkpoint.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    /// Write last-layer attention weights for every utterance.
    #[arg(long, value_name = "PATH")]
    pub dump_attention: Option<PathBuf>,
    /// Print published scores beside the measured ones.
    #[arg(long, value_enum)]
    pub reference: Option<Reference>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// One space-separated tokenized utterance per line.
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Defaults to standard output.
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub dump_attention: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub seed: u64,
    /// Scale one primitive's backward rule by 1.01 (used by tests).
    #[arg(long, value_name = "PRIMITIVE", hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_name = "train|dev|test", default_value = "test")]
    pub split: Split,
    #[arg(long, value_name = "PATH", default_value = "wheelgat-ablation")]
    pub out_dir: PathBuf,
    /// Train the five variants concurrently.
    #[arg(long)]
    pub parallel: bool,
}

/// Published test scores used for side-by-side reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Reference {
    Atis,
    Snips,
}

impl Reference {
    /// (slot F1, intent accuracy, sentence accuracy), in percent.
    pub fn scores(self) -> (f64, f64, f64) {
        match self {
            Reference::Atis => (96.0, 97.5, 87.2),
            Reference::Snips => (94.8, 98.4, 87.4),
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Ablate(a) => commands::ablate(&a),
    }
}
