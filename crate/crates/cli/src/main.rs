//! Command-line surface wiring configuration files and flags to the
//! library: covariance estimation, one-shot optimization, frontier
//! tracing, factor-model fits, rolling backtests, regularization grid
//! searches, synthetic data generation, performance reports and timing
//! benchmarks.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on runtime failures
//! (with a machine-readable `{"error": ...}` JSON line on stderr). Every
//! run writes a `resolved_config.json` next to its outputs. Output files
//! are written atomically (write to a temporary name, then rename). The
//! `QPFOLIO_THREADS` environment variable caps the worker thread count.

mod commands;
mod config;
mod output;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "qpfolio", version, about = "Portfolio optimization through quadratic programming")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a covariance matrix from a returns panel
    Cov(commands::cov::CovArgs),
    /// Solve one portfolio problem from a configuration file
    Optimize(commands::optimize::OptimizeArgs),
    /// Trace a mean-variance frontier over a target grid
    Frontier(commands::frontier::FrontierArgs),
    /// Fit the characteristic-instrumented factor model
    IpcaFit(commands::ipca_fit::IpcaFitArgs),
    /// Run a rolling-window out-of-sample backtest
    Backtest(commands::backtest::BacktestArgs),
    /// Grid-search regularization strengths by out-of-sample Sharpe
    Grid(commands::grid::GridArgs),
    /// Generate a synthetic returns/characteristics panel with known truth
    Synth(commands::synth::SynthArgs),
    /// Compute the performance-metric report and plot-ready series
    Report(commands::report::ReportArgs),
    /// Time the solver on standard problem classes
    Bench(commands::bench::BenchArgs),
}

fn init_thread_cap() {
    if let Ok(value) = std::env::var("QPFOLIO_THREADS") {
        if let Ok(threads) = value.parse::<usize>() {
            if threads >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global();
            }
        }
    }
}

fn main() {
    init_thread_cap();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Cov(args) => commands::cov::run(args),
        Command::Optimize(args) => commands::optimize::run(args),
        Command::Frontier(args) => commands::frontier::run(args),
        Command::IpcaFit(args) => commands::ipca_fit::run(args),
        Command::Backtest(args) => commands::backtest::run(args),
        Command::Grid(args) => commands::grid::run(args),
        Command::Synth(args) => commands::synth::run(args),
        Command::Report(args) => commands::report::run(args),
        Command::Bench(args) => commands::bench::run(args),
    };
    if let Err(error) = result {
        let payload = serde_json::json!({ "error": format!("{error:#}") });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}
