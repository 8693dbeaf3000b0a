pub mod backtest;
pub mod bench;
pub mod cov;
pub mod frontier;
pub mod grid;
pub mod ipca_fit;
pub mod optimize;
pub mod report;
pub mod synth;

use crate::config::DataBlock;
use anyhow::{bail, Context, Result};
use nalgebra::DVector;
use qpfolio::backtest::EstimatorConfig;
use qpfolio::covariance::{self, CovarianceEstimate};
use qpfolio::data::{CharacteristicsPanel, ReturnsPanel};
use qpfolio::ipca;

pub(crate) fn load_returns(data: &DataBlock) -> Result<ReturnsPanel> {
    let path = data
        .returns
        .as_deref()
        .context("a returns CSV is required (data.returns or --returns)")?;
    let kind = data.return_kind.unwrap_or_default();
    qpfolio::data::load_returns_csv(path, kind).with_context(|| format!("loading {path}"))
}

pub(crate) fn load_characteristics(
    data: &DataBlock,
    returns: &ReturnsPanel,
) -> Result<CharacteristicsPanel> {
    let path = data
        .characteristics
        .as_deref()
        .context("a characteristics CSV is required (data.characteristics or --chars)")?;
    let strict = data.strict.unwrap_or(false);
    let panel = qpfolio::data::load_characteristics_csv(path, strict)
        .with_context(|| format!("loading {path}"))?;
    let aligned = panel
        .reorder_assets(returns.assets())
        .context("aligning characteristics to the returns panel")?;
    if aligned.dates() != returns.dates() {
        bail!("characteristics dates do not match the returns panel");
    }
    Ok(aligned)
}

fn require_complete(panel: &ReturnsPanel) -> Result<()> {
    if let Some(mask) = panel.mask() {
        if mask.iter().any(|&active| !active) {
            bail!(
                "estimators require a complete panel; this one has masked cells \
                 (run a backtest with a universe rule instead)"
            );
        }
    }
    Ok(())
}

pub(crate) fn sample_mean(panel: &ReturnsPanel) -> DVector<f64> {
    let t = panel.n_periods() as f64;
    DVector::from_fn(panel.n_assets(), |j, _| {
        panel.values().column(j).sum() / t
    })
}

/// Full-panel covariance estimation; the IPCA estimator fits the whole
/// panel and forecasts with the latest characteristics.
pub(crate) fn covariance_from(
    estimator: &EstimatorConfig,
    returns: &ReturnsPanel,
    chars: Option<&CharacteristicsPanel>,
) -> Result<CovarianceEstimate> {
    require_complete(returns)?;
    let est = match estimator {
        EstimatorConfig::Sample { repair_floor } => {
            let est = covariance::sample_cov(returns.values())?;
            match repair_floor {
                Some(floor) => covariance::repair_singular(&est, *floor)?,
                None => est,
            }
        }
        EstimatorConfig::LinearShrinkage => covariance::linear_shrinkage(returns.values())?,
        EstimatorConfig::Qis => covariance::qis_shrinkage(returns.values())?,
        EstimatorConfig::Ipca {
            rank,
            rank_transform,
            tol,
            max_sweeps,
        } => {
            let chars = chars.context("the IPCA estimator needs a characteristics panel")?;
            let chars = if *rank_transform {
                chars.rank_transform()
            } else {
                chars.clone()
            };
            let model = ipca::fit_ipca(returns, &chars, *rank, *tol, *max_sweeps)?;
            let latest = chars.matrix(returns.n_periods() - 1);
            ipca::ipca_covariance(&model, latest)?
        }
    };
    Ok(est)
}
