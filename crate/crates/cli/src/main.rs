//! `hedgelab`: configuration-driven front end for the hedging pipeline.
//!
//! Exit status is 0 on success, 2 for invalid configuration or a missing
//! upstream artifact, and 1 when a stage fails while running.

mod commands;
mod config;
mod stage;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "hedgelab", version, about = "Deep hedging laboratory: data, forecasting, pricing, agent training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read (or simulate) the OHLC panel and option chain and filter eligible quotes.
    Ingest(Common),
    /// Train the return forecaster and score it against constant-Gaussian baselines.
    TrainForecaster(Common),
    /// Sample price paths from the trained forecaster.
    SamplePaths(Common),
    /// Invert implied volatilities and write the expert Delta dataset.
    BuildExpert(Common),
    /// Behavior-clone the expert into the actor.
    Pretrain(Common),
    /// Fine-tune the agent with PPO or A2C on simulated episodes.
    Finetune(Common),
    /// Evaluate strategies on paired episodes.
    Evaluate(Common),
    /// Evaluate strategies over a range of cost rates.
    Sweep(Common),
    /// Tabulate terminal values by entry moneyness and maturity.
    Grid(Common),
    /// Summarize the run's artifacts as markdown.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set agent.ppo.lambda=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for episode-level parallelism.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("`{command}` needs {path}; run `hedgelab {producer}` first")]
    MissingArtifact { command: String, path: PathBuf, producer: String },
    #[error(transparent)]
    Pipeline(#[from] hedgelab::Error),
    #[error("{0}")]
    Run(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> CliError {
        CliError::Io { path: path.to_path_buf(), source }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::MissingArtifact { .. } => 2,
            _ => 1,
        }
    }
}

macro_rules! pipeline_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Pipeline(e.into())
            }
        }
    )*};
}

pipeline_errors!(
    hedgelab::marketdata::DataError,
    hedgelab::forecaster::ForecastError,
    hedgelab::pricing::PricingError,
    hedgelab::paths::PathError,
    hedgelab::hedgenv::HedgeError,
    hedgelab::agent::AgentError,
    hedgelab::evalkit::EvalError
);

fn run(command: &Command) -> Result<(), CliError> {
    let common = match command {
        Command::Ingest(c)
        | Command::TrainForecaster(c)
        | Command::SamplePaths(c)
        | Command::BuildExpert(c)
        | Command::Pretrain(c)
        | Command::Finetune(c)
        | Command::Evaluate(c)
        | Command::Sweep(c)
        | Command::Grid(c)
        | Command::Report(c) => c,
    };
    let level = match common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if common.workers == 0 {
        return Err(CliError::Config("--workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.workers)
        .build_global()
        .map_err(|e| CliError::Run(e.to_string()))?;
    let cfg = RunConfig::load(&common.config, &common.overrides)?;
    match command {
        Command::Ingest(_) => commands::ingest(&cfg),
        Command::TrainForecaster(_) => commands::train_forecaster(&cfg),
        Command::SamplePaths(_) => commands::sample_paths(&cfg),
        Command::BuildExpert(_) => commands::build_expert(&cfg),
        Command::Pretrain(_) => commands::pretrain(&cfg),
        Command::Finetune(_) => commands::finetune(&cfg),
        Command::Evaluate(_) => commands::evaluate(&cfg),
        Command::Sweep(_) => commands::sweep(&cfg),
        Command::Grid(_) => commands::grid(&cfg),
        Command::Report(_) => commands::report(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code())
        }
    }
}
