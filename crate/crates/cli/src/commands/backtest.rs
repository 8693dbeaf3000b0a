use crate::config::{FileConfig, Precision};
use crate::output::{display_written, OutputDir};
use anyhow::{Context, Result};
use clap::Args;
use qpfolio::backtest::{
    run_backtest, write_returns_series_csv, write_weights_csv, BacktestConfig, EstimatorConfig,
    UniverseRule,
};

#[derive(Args)]
pub struct BacktestArgs {
    /// JSON configuration with data, estimator, portfolio and backtest blocks
    #[arg(long)]
    config: String,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    rebalance_every: Option<usize>,
    /// Solver precision: default | high
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

pub(crate) fn build_config(
    file: &FileConfig,
    window: Option<usize>,
    rebalance_every: Option<usize>,
    precision: Option<&str>,
) -> Result<BacktestConfig> {
    let template = file
        .portfolio
        .clone()
        .context("config needs a portfolio block")?;
    let estimator = file
        .estimator
        .clone()
        .unwrap_or(EstimatorConfig::Sample { repair_floor: None });
    let block = file.backtest.clone().unwrap_or_default();
    let precision = super::optimize::parse_precision(precision, block.precision)?;
    Ok(BacktestConfig {
        window_length: window.or(block.window_length).unwrap_or(360),
        rebalance_every: rebalance_every.or(block.rebalance_every).unwrap_or(1),
        estimator,
        template,
        universe: block.universe.unwrap_or(UniverseRule::FullHistoryOnly),
        periods_per_year: block.periods_per_year.unwrap_or(12),
        solver: precision.settings(),
    })
}

pub fn run(args: BacktestArgs) -> Result<()> {
    let file = FileConfig::load(Some(&args.config))?;
    let data = file.data.clone().unwrap_or_default();
    let config = build_config(
        &file,
        args.window,
        args.rebalance_every,
        args.precision.as_deref(),
    )?;
    let out_dir = args
        .out
        .or(file.output.as_ref().and_then(|o| o.dir.clone()))
        .unwrap_or_else(|| ".".into());

    let returns = super::load_returns(&data)?;
    let chars = if matches!(config.estimator, EstimatorConfig::Ipca { .. }) {
        Some(super::load_characteristics(&data, &returns)?)
    } else {
        None
    };
    let result = run_backtest(&returns, chars.as_ref(), &config)?;

    let out = OutputDir::create(&out_dir)?;
    let mut written = Vec::new();
    written.push(out.write_csv_with("returns_series.csv", |buf| {
        write_returns_series_csv(&result, buf)?;
        Ok(())
    })?);
    written.push(out.write_csv_with("weights.csv", |buf| {
        write_weights_csv(&result, buf)?;
        Ok(())
    })?);
    written.push(out.write_json("diagnostics.json", &result.diagnostics)?);
    let resolved = serde_json::json!({
        "data": data,
        "estimator": config.estimator,
        "portfolio": config.template,
        "backtest": {
            "window_length": config.window_length,
            "rebalance_every": config.rebalance_every,
            "universe": config.universe,
            "periods_per_year": config.periods_per_year,
            "precision": if config.solver.eps_abs <= 1e-8 { Precision::High } else { Precision::Default },
        },
        "output": { "dir": out_dir },
    });
    written.push(out.write_resolved_config(&resolved)?);
    display_written(&written);
    Ok(())
}
