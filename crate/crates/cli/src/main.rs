//! `remtime`: event log to graph dataset to trained model to report.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use remtime_core::prefixing::SplitMode;
use remtime_core::training::Profile;
use remtime_core::ErrorClass;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(remtime_core::Error),
}

impl From<remtime_core::Error> for CliError {
    fn from(e: remtime_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            },
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "Usage",
            CliError::Core(e) => e.kind(),
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LogFormat {
    Csv,
    Xes,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Cv,
    Holdout,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProfileArg {
    Paper,
    Desk,
}

#[derive(Debug, Parser)]
#[command(name = "remtime", version, about = "Remaining-time prediction with graph transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Event log (CSV or XES).
    #[arg(long, global = true)]
    pub log: Option<PathBuf>,
    /// JSON schema file with CSV column mapping and attribute declarations.
    #[arg(long, global = true)]
    pub schema: Option<PathBuf>,
    /// Log format; inferred from the file extension when omitted.
    #[arg(long, global = true, value_enum)]
    pub format: Option<LogFormat>,
    #[arg(long, global = true, value_enum)]
    pub split: Option<SplitArg>,
    #[arg(long, global = true)]
    pub folds: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub profile: Option<ProfileArg>,
    /// Output directory; artifacts use fixed names inside it.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the number of training epochs.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Fold whose training cases define statistics and training data.
    #[arg(long, global = true, default_value_t = 0)]
    pub fold: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the bundled two-variant synthetic log (log.csv, schema.json).
    Generate {
        #[arg(long, default_value_t = 30)]
        cases: usize,
    },
    /// Print log statistics as JSON.
    Stats,
    /// Assign cases to folds (split.json).
    Split,
    /// Build the graph dataset (dataset.jsonl) and its statistics (stats.json).
    Convert,
    /// Train on one fold (checkpoint.bin, metrics.csv).
    Train,
    /// Cross-validate model and baseline over folds and seeds (report.json).
    Evaluate {
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Per-length mean baseline on one fold (baseline.json).
    Baseline,
    /// Earliness table from report.json (earliness.csv).
    Report,
}

impl Cli {
    pub fn overrides(&self) -> config::Overrides {
        config::Overrides {
            profile: self.profile.map(|p| match p {
                ProfileArg::Paper => Profile::Paper,
                ProfileArg::Desk => Profile::Desk,
            }),
            seed: self.seed,
            split: self.split.map(|s| match s {
                SplitArg::Cv => SplitMode::Cv,
                SplitArg::Holdout => SplitMode::Holdout,
            }),
            folds: self.folds,
            epochs: self.epochs,
            seeds: match &self.command {
                Command::Evaluate { seeds } => seeds.clone(),
                _ => None,
            },
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            report_error(&CliError::Usage(e.to_string().trim().to_string()));
            return ExitCode::from(1);
        }
    };
    match commands::run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            report_error(&e);
            ExitCode::from(e.exit_code())
        }
    }
}

fn report_error(e: &CliError) {
    let line = serde_json::json!({
        "error": e.kind(),
        "message": e.message(),
        "exit_code": e.exit_code(),
    });
    eprintln!("{line}");
}
