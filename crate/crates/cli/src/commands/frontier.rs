use crate::config::FileConfig;
use crate::output::{display_written, OutputDir};
use anyhow::{Context, Result};
use clap::Args;
use qpfolio::portfolio::{efficient_frontier, Objective};

#[derive(Args)]
pub struct FrontierArgs {
    /// JSON configuration with data, estimator and portfolio blocks
    #[arg(long)]
    config: String,
    /// Number of target-mean grid points
    #[arg(long, default_value_t = 25)]
    points: usize,
    /// Lowest target mean (defaults to the smallest asset mean)
    #[arg(long)]
    min_target: Option<f64>,
    /// Highest target mean (defaults to the largest asset mean)
    #[arg(long)]
    max_target: Option<f64>,
    /// Solver precision: default | high
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

pub fn run(args: FrontierArgs) -> Result<()> {
    let file = FileConfig::load(Some(&args.config))?;
    let data = file.data.clone().unwrap_or_default();
    let template = file
        .portfolio
        .clone()
        .context("config needs a portfolio block")?;
    let estimator = file
        .estimator
        .clone()
        .unwrap_or(qpfolio::backtest::EstimatorConfig::Sample { repair_floor: None });
    let precision = super::optimize::parse_precision(
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

    let lo = args
        .min_target
        .unwrap_or_else(|| mu.iter().copied().fold(f64::MAX, f64::min));
    let hi = args
        .max_target
        .unwrap_or_else(|| mu.iter().copied().fold(f64::MIN, f64::max));
    let points = args.points.max(1);
    let targets: Vec<f64> = (0..points)
        .map(|k| {
            if points == 1 {
                lo
            } else {
                lo + (hi - lo) * k as f64 / (points - 1) as f64
            }
        })
        .collect();

    let mut spec = template.instantiate(Some(mu), estimate.matrix, None)?;
    if matches!(spec.objective, Objective::MaxSharpe { .. }) {
        anyhow::bail!("frontier tracing needs a min_variance or mean_variance objective");
    }
    spec.objective = Objective::MeanVariance { target_mean: lo };
    let points = efficient_frontier(&spec, &targets, &precision.settings())?;

    let out = OutputDir::create(&out_dir)?;
    let mut written = Vec::new();
    written.push(out.write_csv_with("frontier.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["target_mean", "feasible", "mean", "stdev"])?;
        for p in &points {
            w.write_record([
                format!("{}", p.target_mean),
                format!("{}", p.feasible),
                p.mean.map(|v| format!("{v}")).unwrap_or_default(),
                p.stdev.map(|v| format!("{v}")).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?);
    let resolved = serde_json::json!({
        "data": data,
        "estimator": estimator,
        "portfolio": template,
        "frontier": { "points": args.points, "min_target": lo, "max_target": hi },
        "precision": precision,
        "output": { "dir": out_dir },
    });
    written.push(out.write_resolved_config(&resolved)?);
    display_written(&written);
    Ok(())
}
