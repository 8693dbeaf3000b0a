use crate::config::FileConfig;
use crate::output::{display_written, OutputDir};
use anyhow::Result;
use clap::Args;
use qpfolio::backtest::{
    default_l1_grid, default_l2_grid, grid_search, write_grid_csv, EstimatorConfig,
};

#[derive(Args)]
pub struct GridArgs {
    /// JSON configuration with data, estimator, portfolio and backtest blocks
    #[arg(long)]
    config: String,
    /// Number of l1 grid points over [1e-6, 0.1] when the config gives no
    /// explicit l1_grid
    #[arg(long, default_value_t = 5)]
    l1_points: usize,
    /// Number of l2 grid points over [1e-2, 5]
    #[arg(long, default_value_t = 5)]
    l2_points: usize,
    /// Prepend the unregularized (0, 0) cell to both axes
    #[arg(long, default_value_t = false)]
    include_zero: bool,
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

pub fn run(args: GridArgs) -> Result<()> {
    let file = FileConfig::load(Some(&args.config))?;
    let data = file.data.clone().unwrap_or_default();
    let config = super::backtest::build_config(&file, None, None, args.precision.as_deref())?;
    let out_dir = args
        .out
        .or(file.output.as_ref().and_then(|o| o.dir.clone()))
        .unwrap_or_else(|| ".".into());

    let block = file.backtest.clone().unwrap_or_default();
    let mut l1 = block.l1_grid.unwrap_or_else(|| default_l1_grid(args.l1_points));
    let mut l2 = block.l2_grid.unwrap_or_else(|| default_l2_grid(args.l2_points));
    if args.include_zero {
        l1.insert(0, 0.0);
        l2.insert(0, 0.0);
    }

    let returns = super::load_returns(&data)?;
    let chars = if matches!(config.estimator, EstimatorConfig::Ipca { .. }) {
        Some(super::load_characteristics(&data, &returns)?)
    } else {
        None
    };
    let result = grid_search(&returns, chars.as_ref(), &config, &l1, &l2)?;

    let out = OutputDir::create(&out_dir)?;
    let mut written = Vec::new();
    written.push(out.write_csv_with("grid_heatmap.csv", |buf| {
        write_grid_csv(&result, buf)?;
        Ok(())
    })?);
    written.push(out.write_json(
        "grid_summary.json",
        &serde_json::json!({
            "baseline_sharpe": result.baseline_sharpe,
            "best": result.best.map(|(l1, l2, s)| serde_json::json!({
                "l1": l1, "l2": l2, "sharpe": s
            })),
            "cells": result.cells.len(),
        }),
    )?);
    let resolved = serde_json::json!({
        "data": data,
        "estimator": config.estimator,
        "portfolio": config.template,
        "backtest": {
            "window_length": config.window_length,
            "rebalance_every": config.rebalance_every,
            "universe": config.universe,
            "periods_per_year": config.periods_per_year,
            "l1_grid": l1,
            "l2_grid": l2,
        },
        "output": { "dir": out_dir },
    });
    written.push(out.write_resolved_config(&resolved)?);
    display_written(&written);
    Ok(())
}
