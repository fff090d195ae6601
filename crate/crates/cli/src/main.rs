//! `promptgrad` command-line entry point.

mod commands;
mod config;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use promptgrad::ErrorCategory;

use config::{BackendChoice, FormatChoice, Overrides, StrategyChoice};

/// Error with the category that decides the exit status.
#[derive(Debug)]
pub struct CliError {
    pub category: ErrorCategory,
    pub message: String,
}

impl CliError {
    pub fn new(category: ErrorCategory, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.category {
            ErrorCategory::Config => 3,
            ErrorCategory::Data => 4,
            ErrorCategory::Transport => 5,
            ErrorCategory::Auth => 6,
            ErrorCategory::Io => 7,
        }
    }
}

impl<E: Into<promptgrad::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        let e = e.into();
        Self::new(e.category(), e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "promptgrad",
    version,
    about = "Optimize and evaluate QA system prompts with textual gradients"
)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize the system prompt, then score the best prompt on the test split.
    Optimize {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue an interrupted run in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a prompting strategy on the test split.
    Baseline {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        strategy: Option<StrategyChoice>,
        /// Number of few-shot exemplars.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Evaluate a fixed system prompt on the test split.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// File holding the system prompt.
        #[arg(long)]
        prompt: PathBuf,
    },
    /// Compare finished runs in a text table and optional CSV.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Canonical JSONL dataset (the train file for pre-split benchmarks).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Test JSONL for pre-split benchmarks.
    #[arg(long)]
    test_dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatChoice>,
    /// Seed for splits, batch order and few-shot sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Backend for both engines.
    #[arg(long, value_enum)]
    backend: Option<BackendChoice>,
    /// JSON mock script; `{"task": ..., "backward": ...}` or one script for both.
    #[arg(long)]
    mock_script: Option<PathBuf>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            dataset: self.dataset.clone(),
            test_dataset: self.test_dataset.clone(),
            format: self.format,
            seed: self.seed,
            backend: self.backend,
            mock_script: self.mock_script.clone(),
            ..Default::default()
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Optimize { common, resume } => commands::optimize(
            common.config.as_deref(),
            &common.overrides(),
            &common.out,
            resume,
        ),
        Command::Baseline {
            common,
            strategy,
            k,
        } => {
            let o = Overrides {
                strategy,
                k,
                ..common.overrides()
            };
            commands::baseline(common.config.as_deref(), &o, &common.out)
        }
        Command::Evaluate { common, prompt } => commands::evaluate(
            common.config.as_deref(),
            &common.overrides(),
            &common.out,
            &prompt,
        ),
        Command::Report { runs, csv } => report::report(&runs, csv.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(if cli.verbose {
            tracing::Level::INFO
        } else {
            tracing::Level::WARN
        })
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error ({}): {}", e.category.label(), e.message);
            ExitCode::from(e.exit_code())
        }
    }
}
