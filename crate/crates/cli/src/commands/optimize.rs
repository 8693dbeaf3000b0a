use crate::config::{FileConfig, Precision};
use crate::output::{display_written, OutputDir};
use anyhow::{Context, Result};
use clap::Args;
use qpfolio::portfolio;
use qpfolio::qp;

#[derive(Args)]
pub struct OptimizeArgs {
    /// JSON configuration with data, estimator and portfolio blocks
    #[arg(long)]
    config: String,
    /// Solver precision: default | high
    #[arg(long)]
    precision: Option<String>,
    /// Output directory
    #[arg(long)]
    out: Option<String>,
}

pub(crate) fn parse_precision(flag: Option<&str>, fallback: Option<Precision>) -> Result<Precision> {
    match flag {
        None => Ok(fallback.unwrap_or(Precision::High)),
        Some("default") => Ok(Precision::Default),
        Some("high") => Ok(Precision::High),
        Some(other) => anyhow::bail!("unknown precision {other:?}; expected default or high"),
    }
}

pub fn run(args: OptimizeArgs) -> Result<()> {
    let mut file = FileConfig::load(Some(&args.config))?;
    let data = file.data.clone().unwrap_or_default();
    let template = file
        .portfolio
        .clone()
        .context("config needs a portfolio block")?;
    let estimator = file
        .estimator
        .clone()
        .unwrap_or(qpfolio::backtest::EstimatorConfig::Sample { repair_floor: None });
    let precision = parse_precision(
        args.precision.as_deref(),
        file.backtest.as_ref().and_then(|b| b.precision),
    )?;
    let out_dir = args
        .out
        .or(file.output.as_ref().and_then(|o| o.dir.clone()))
        .unwrap_or_else(|| ".".into());

    let returns = super::load_returns(&data)?;
    let chars = if matches!(estimator, qpfolio::backtest::EstimatorConfig::Ipca { .. }) {
        Some(super::load_characteristics(&data, &returns)?)
    } else {
        None
    };
    let estimate = super::covariance_from(&estimator, &returns, chars.as_ref())?;
    let mu = super::sample_mean(&returns);
    let spec = template.instantiate(Some(mu), estimate.matrix, None)?;

    let settings = precision.settings();
    let (weights, solution_info) = if spec.constraints.tracking_error.is_some() {
        let sol = portfolio::solve_with_tracking_error(&spec, &settings)?;
        let info = serde_json::json!({
            "status": "Solved",
            "tracking_variance": sol.tracking_variance,
            "penalty": sol.penalty,
            "bisection_steps": sol.bisection_steps,
        });
        (sol.weights, info)
    } else {
        let reform = portfolio::build_qp(&spec)?;
        let sol = qp::solve_qp(&reform.qp, &settings)?;
        let report = qp::check_kkt(&reform.qp, &sol, &settings)?;
        let weights = portfolio::recover_weights(&reform, &sol)?;
        let info = serde_json::json!({
            "status": sol.status,
            "iterations": sol.iterations,
            "objective": sol.objective,
            "polished": sol.polished,
            "kkt": { "primal": report.primal, "dual": report.dual, "gap": report.gap },
            "variables": reform.layout.total_vars,
            "constraints": reform.qp.m(),
        });
        (weights, info)
    };

    let out = OutputDir::create(&out_dir)?;
    let mut written = Vec::new();
    written.push(out.write_csv_with("weights.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["asset_id", "weight"])?;
        for (asset, weight) in returns.assets().iter().zip(weights.iter()) {
            w.write_record([asset.as_str(), &format!("{weight}")])?;
        }
        w.flush()?;
        Ok(())
    })?);
    written.push(out.write_json("solution.json", &solution_info)?);
    file.backtest.get_or_insert_with(Default::default).precision = Some(precision);
    file.output = Some(crate::config::OutputBlock {
        dir: Some(out_dir.clone()),
    });
    written.push(out.write_resolved_config(&file)?);
    display_written(&written);
    Ok(())
}
