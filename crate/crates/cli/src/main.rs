//! `pertcard`: train, attribute, evaluate and card a perturbation analysis
//! run from one configuration file.

mod config;
mod pipeline;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Config, Overrides};
use pipeline::Run;

/// Bad invocation or configuration. Exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

/// Missing or malformed input data. Exit code 2.
#[derive(Debug)]
pub struct DataError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}
impl std::error::Error for DataError {}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "pertcard", version, about = "Perturbation analysis cards for time-series attributions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `synthetic`, or a UCR `*_TRAIN.tsv` file.
    #[arg(long, global = true)]
    dataset: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated technique names, or `all`.
    #[arg(long, global = true)]
    techniques: Option<String>,
    /// Comma-separated strategy names, or `all`.
    #[arg(long, global = true)]
    strategies: Option<String>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Build the datasets and train the classifier.
    Train,
    /// Compute attributions for every configured technique.
    Attribute,
    /// Sweep every technique × strategy cell.
    Evaluate,
    /// Write a JSON and SVG card per result.
    Card,
    /// All of the above in order.
    RunAll,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<DataError>() || cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_DATA;
        }
        if let Some(e) = cause.downcast_ref::<pertcard::Error>() {
            return if e.is_numerical_error() { EXIT_NUMERICAL } else { EXIT_DATA };
        }
    }
    EXIT_USAGE
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let c = cli.common;
    let overrides = Overrides {
        dataset: c.dataset,
        seed: c.seed,
        techniques: c.techniques,
        strategies: c.strategies,
        workers: c.workers,
        out_dir: c.out_dir,
    };
    let cfg = Config::load(c.config.as_deref(), &overrides)?;
    let run = Run::new(cfg)?;
    log::info!("run directory {}, config {}", run.path("").display(), run.hash);
    match cli.command {
        Command::Train => run.train(),
        Command::Attribute => run.attribute(),
        Command::Evaluate => run.evaluate(),
        Command::Card => run.card(),
        Command::RunAll => {
            run.train()?;
            run.attribute()?;
            run.evaluate()?;
            run.card()
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = exit_code(&e);
            if code == EXIT_USAGE {
                eprintln!("usage: pertcard <train|attribute|evaluate|card|run-all> [--config FILE] [--dataset PATH] ...");
            }
            ExitCode::from(code)
        }
    }
}
