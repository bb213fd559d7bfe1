//! Command-line driver for the volatility forecasting pipeline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data/artifact error,
//! 4 numerical divergence during training.

mod commands;
mod config;
mod pipeline;

use clap::{Parser, Subcommand};
use commands::Divergence;
use config::RunConfig;
use garchrnn_core::CoreError;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "garchrnn",
    about = "Volatility forecasting with GARCH-gated recurrent models",
    version
)]
struct Cli {
    /// run configuration (JSON)
    #[arg(long, global = true, default_value = "run_config.json")]
    config: PathBuf,

    /// output directory; overrides the config's out_dir
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// restrict the run to a single seed, overriding the config's seed list
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// number of parallel training workers
    #[arg(long, global = true, default_value_t = 1)]
    parallel: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load prices, write return/volatility series and diagnostics
    Prepare,
    /// Fit classical GARCH baselines on the training segment
    FitGarch,
    /// Train recurrent models over all configured horizons and seeds
    Train,
    /// Produce rolling out-of-sample forecasts for every model
    Forecast,
    /// Compute accuracy metrics per seed and aggregated across seeds
    Evaluate,
    /// Run the one-day-ahead Value-at-Risk backtest
    Backtest,
    /// Export fitted recursion parameters to CSV
    Params,
}

fn exit_code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<Divergence>().is_some() {
            return 4;
        }
        if let Some(core) = cause.downcast_ref::<CoreError>() {
            return match core {
                CoreError::Config(_) | CoreError::InvalidParam(_) => 2,
                CoreError::Numerical(_) => 4,
                _ => 3,
            };
        }
    }
    3
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(&cli.config).map_err(|e| {
        // any failure before a config is validated is a configuration error
        e.context(ConfigPhase)
    })?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    let out = cli
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    match cli.command {
        Command::Prepare => commands::cmd_prepare(&cfg, &out),
        Command::FitGarch => commands::cmd_fit_garch(&cfg, &out),
        Command::Train => commands::cmd_train(&cfg, &out, cli.parallel),
        Command::Forecast => commands::cmd_forecast(&cfg, &out),
        Command::Evaluate => commands::cmd_evaluate(&cfg, &out),
        Command::Backtest => commands::cmd_backtest(&cfg, &out),
        Command::Params => commands::cmd_params(&cfg, &out),
    }
}

/// Marker context: errors raised while loading/validating the config map to
/// exit code 2 regardless of their underlying cause.
#[derive(Debug)]
struct ConfigPhase;

impl std::fmt::Display for ConfigPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration")
    }
}

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = if err.downcast_ref::<ConfigPhase>().is_some() {
                2
            } else {
                exit_code_for(&err)
            };
            std::process::exit(code);
        }
    }
}
