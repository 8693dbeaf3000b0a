use crate::config::{DataBlock, FileConfig};
use crate::output::{display_written, OutputDir};
use anyhow::Result;
use clap::Args;
use qpfolio::backtest::EstimatorConfig;

#[derive(Args)]
pub struct CovArgs {
    /// JSON configuration file (flags override its values)
    #[arg(long)]
    config: Option<String>,
    /// Returns CSV (wide: date column, one column per asset)
    #[arg(long)]
    returns: Option<String>,
    /// Characteristics CSV (long format), for the IPCA estimator
    #[arg(long)]
    chars: Option<String>,
    /// Estimator: sample | linear_shrinkage | qis | ipca
    #[arg(long)]
    estimator: Option<String>,
    /// Factor rank for the IPCA estimator
    #[arg(long)]
    rank: Option<usize>,
    /// Spectrum floor ratio for repairing a singular sample estimate
    #[arg(long)]
    repair: Option<f64>,
    /// Output directory
    #[arg(long)]
    out: Option<String>,
}

pub(crate) fn estimator_from_flag(
    name: Option<&str>,
    rank: Option<usize>,
    repair: Option<f64>,
    fallback: Option<EstimatorConfig>,
) -> Result<EstimatorConfig> {
    match name {
        None => Ok(fallback.unwrap_or(EstimatorConfig::Sample { repair_floor: None })),
        Some("sample") => Ok(EstimatorConfig::Sample {
            repair_floor: repair,
        }),
        Some("linear_shrinkage") | Some("linear") => Ok(EstimatorConfig::LinearShrinkage),
        Some("qis") => Ok(EstimatorConfig::Qis),
        Some("ipca") => Ok(EstimatorConfig::Ipca {
            rank: rank.unwrap_or(5),
            rank_transform: false,
            tol: qpfolio::ipca::DEFAULT_TOL,
            max_sweeps: qpfolio::ipca::DEFAULT_MAX_SWEEPS,
        }),
        Some(other) => anyhow::bail!(
            "unknown estimator {other:?}; expected sample, linear_shrinkage, qis or ipca"
        ),
    }
}

pub fn run(args: CovArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut data = file.data.unwrap_or_default();
    if args.returns.is_some() {
        data.returns = args.returns.clone();
    }
    if args.chars.is_some() {
        data.characteristics = args.chars.clone();
    }
    let estimator = estimator_from_flag(
        args.estimator.as_deref(),
        args.rank,
        args.repair,
        file.estimator,
    )?;
    let out_dir = args
        .out
        .or(file.output.and_then(|o| o.dir))
        .unwrap_or_else(|| ".".into());

    let returns = super::load_returns(&data)?;
    let chars = if matches!(estimator, EstimatorConfig::Ipca { .. }) {
        Some(super::load_characteristics(&data, &returns)?)
    } else {
        None
    };
    let estimate = super::covariance_from(&estimator, &returns, chars.as_ref())?;

    let out = OutputDir::create(&out_dir)?;
    let mut written = Vec::new();
    written.push(out.write_csv_with("covariance.csv", |buf| {
        estimate.write_csv(returns.assets(), buf)?;
        Ok(())
    })?);
    written.push(out.write_atomic(
        "covariance_diagnostics.json",
        estimate.diagnostics_json().as_bytes(),
    )?);
    let resolved = resolved_config(&data, &estimator, &out_dir);
    written.push(out.write_resolved_config(&resolved)?);
    display_written(&written);
    Ok(())
}

fn resolved_config(
    data: &DataBlock,
    estimator: &EstimatorConfig,
    out_dir: &str,
) -> FileConfig {
    FileConfig {
        data: Some(data.clone()),
        estimator: Some(estimator.clone()),
        portfolio: None,
        backtest: None,
        output: Some(crate::config::OutputBlock {
            dir: Some(out_dir.to_string()),
        }),
    }
}
