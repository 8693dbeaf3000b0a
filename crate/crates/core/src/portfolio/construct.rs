//! Portfolio constructions built on top of the QP reduction: frontier
//! tracing, random simplex portfolios, equal risk contribution, and the
//! tracking-error-constrained solve.

use super::build::{build_with_penalty, solve_portfolio};
use super::{Objective, PortfolioError, PortfolioSpec};
use crate::par;
use crate::qp::{solve_qp, QpSettings, QpStatus};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

/// One evaluated frontier target.
#[derive(Debug, Clone)]
pub struct FrontierPoint {
    pub target_mean: f64,
    pub feasible: bool,
    pub status: QpStatus,
    /// Realized portfolio mean `w' mu` (when feasible).
    pub mean: Option<f64>,
    /// Realized portfolio standard deviation under the unregularized
    /// covariance (when feasible).
    pub stdev: Option<f64>,
    pub weights: Option<DVector<f64>>,
}

/// Solves the mean-variance problem across a grid of target means.
/// Infeasible targets are flagged, not dropped. Targets run in parallel
/// under the `parallel` feature.
pub fn efficient_frontier(
    spec: &PortfolioSpec,
    targets: &[f64],
    settings: &QpSettings,
) -> Result<Vec<FrontierPoint>, PortfolioError> {
    if targets.is_empty() {
        return Err(PortfolioError::EmptyGrid);
    }
    if matches!(spec.objective, Objective::MaxSharpe { .. }) {
        return Err(PortfolioError::FrontierObjective);
    }
    if spec.mean.is_none() {
        return Err(PortfolioError::MeanRequired);
    }
    spec.validate()?;
    let mu = spec.mean.clone().expect("checked");
    let sigma = spec.covariance.clone();

    let points = par::map(targets.to_vec(), move |target| {
        let point_spec = PortfolioSpec {
            objective: Objective::MeanVariance {
                target_mean: target,
            },
            ..spec.clone()
        };
        match solve_portfolio(&point_spec, settings) {
            Ok(sol) => {
                let mean = sol.weights.dot(&mu);
                let var = (sol.weights.transpose() * &sigma * &sol.weights)[(0, 0)];
                FrontierPoint {
                    target_mean: target,
                    feasible: true,
                    status: sol.qp_solution.status,
                    mean: Some(mean),
                    stdev: Some(var.max(0.0).sqrt()),
                    weights: Some(sol.weights),
                }
            }
            Err(PortfolioError::NotSolved(status)) => FrontierPoint {
                target_mean: target,
                feasible: false,
                status,
                mean: None,
                stdev: None,
                weights: None,
            },
            Err(_) => FrontierPoint {
                target_mean: target,
                feasible: false,
                status: QpStatus::MaxIterReached,
                mean: None,
                stdev: None,
                weights: None,
            },
        }
    });
    Ok(points)
}

/// Draws `draws` portfolios uniformly from the simplex (flat Dirichlet):
/// exponential spacings normalized to unit sum. Deterministic per seed.
pub fn random_dirichlet_portfolios(
    n_assets: usize,
    draws: usize,
    seed: u64,
) -> Result<DMatrix<f64>, PortfolioError> {
    if n_assets == 0 || draws == 0 {
        return Err(PortfolioError::EmptyDraws);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(draws, n_assets);
    for d in 0..draws {
        let mut sum = 0.0;
        for j in 0..n_assets {
            let e: f64 = rng.sample(Exp1);
            out[(d, j)] = e;
            sum += e;
        }
        for j in 0..n_assets {
            out[(d, j)] /= sum;
        }
    }
    Ok(out)
}

const ERC_MAX_SWEEPS: usize = 10_000;
const ERC_TOL: f64 = 1e-11;

/// Long-only portfolio equalizing the per-asset risk contributions
/// `w_i (Sigma w)_i`, found by cyclic coordinate updates of the
/// log-barrier formulation and a final normalization.
pub fn equal_risk_contribution(sigma: &DMatrix<f64>) -> Result<DVector<f64>, PortfolioError> {
    let n = sigma.nrows();
    if sigma.ncols() != n || n == 0 {
        return Err(PortfolioError::Validation(format!(
            "covariance is {}x{}",
            n,
            sigma.ncols()
        )));
    }
    if Cholesky::new(sigma.clone()).is_none() {
        return Err(PortfolioError::NotPositiveDefinite);
    }

    // y solves: minimize (1/2) y' Sigma y - (1/N) sum_i log y_i; the ERC
    // weights are y normalized. Coordinate update solves a scalar
    // quadratic exactly.
    let target = 1.0 / n as f64;
    let mut y = DVector::from_fn(n, |i, _| 1.0 / (n as f64 * sigma[(i, i)].sqrt()));
    let mut sy = sigma * &y;
    for sweep in 0..ERC_MAX_SWEEPS {
        for i in 0..n {
            let sii = sigma[(i, i)];
            let b = sy[i] - sii * y[i];
            let root = (-b + (b * b + 4.0 * sii * target).sqrt()) / (2.0 * sii);
            let delta = root - y[i];
            if delta != 0.0 {
                for r in 0..n {
                    sy[r] += sigma[(r, i)] * delta;
                }
                y[i] = root;
            }
        }
        // convergence on normalized risk contributions
        let total = y.dot(&sy);
        let mut lo = f64::MAX;
        let mut hi = f64::MIN;
        for i in 0..n {
            let rc = y[i] * sy[i] / total;
            lo = lo.min(rc);
            hi = hi.max(rc);
        }
        if hi - lo < ERC_TOL {
            let sum = y.sum();
            let _ = sweep;
            return Ok(y / sum);
        }
    }
    Err(PortfolioError::ErcNoConvergence(ERC_MAX_SWEEPS))
}

/// Result of a tracking-error-constrained solve.
#[derive(Debug, Clone)]
pub struct TrackingErrorSolution {
    pub weights: DVector<f64>,
    /// Realized tracking variance `(w - b)' Sigma (w - b)`.
    pub tracking_variance: f64,
    /// Penalty multiplier at which the solution was taken (0 when the
    /// constraint is slack).
    pub penalty: f64,
    pub bisection_steps: usize,
}

const TE_MAX_DOUBLINGS: usize = 60;
const TE_BISECT_STEPS: usize = 200;

/// Enforces `(w - b)' Sigma (w - b) <= limit` by bisecting a quadratic
/// penalty multiplier: the penalized objective is solved repeatedly until
/// the constraint is active (or slack at zero penalty). Max-Sharpe
/// objectives are not supported here; the scale reparametrization does not
/// commute with the penalty.
pub fn solve_with_tracking_error(
    spec: &PortfolioSpec,
    settings: &QpSettings,
) -> Result<TrackingErrorSolution, PortfolioError> {
    let te = spec
        .constraints
        .tracking_error
        .clone()
        .ok_or(PortfolioError::TrackingErrorMissing)?;
    if matches!(spec.objective, Objective::MaxSharpe { .. }) {
        return Err(PortfolioError::TrackingErrorWithMaxSharpe);
    }
    spec.validate()?;
    let mut base = spec.clone();
    base.constraints.tracking_error = None;
    let sigma = spec.covariance.clone();
    let benchmark = te.benchmark.clone();
    let limit = te.variance_limit;

    let tracking_var = |w: &DVector<f64>| {
        let d = w - &benchmark;
        (d.transpose() * &sigma * &d)[(0, 0)]
    };
    let solve_at = |nu: f64| -> Result<(DVector<f64>, f64), PortfolioError> {
        let reform = if nu == 0.0 {
            build_with_penalty(&base, None)?
        } else {
            build_with_penalty(&base, Some((nu, &benchmark)))?
        };
        let sol = solve_qp(&reform.qp, settings)?;
        let w = super::recover_weights(&reform, &sol)?;
        let tv = tracking_var(&w);
        Ok((w, tv))
    };

    let tol = 1e-8 * limit.max(1e-8);
    let (w0, tv0) = solve_at(0.0)?;
    if tv0 <= limit + tol {
        return Ok(TrackingErrorSolution {
            weights: w0,
            tracking_variance: tv0,
            penalty: 0.0,
            bisection_steps: 0,
        });
    }

    // find a penalty large enough to satisfy the limit
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    let mut best: Option<(DVector<f64>, f64, f64)> = None;
    let mut steps = 0usize;
    for _ in 0..TE_MAX_DOUBLINGS {
        steps += 1;
        let (w, tv) = solve_at(hi)?;
        if tv <= limit + tol {
            best = Some((w, tv, hi));
            break;
        }
        lo = hi;
        hi *= 8.0;
    }
    let (mut best_w, mut best_tv, mut best_nu) = best.ok_or({
        let achieved = solve_at(hi).map(|(_, tv)| tv).unwrap_or(f64::NAN);
        PortfolioError::TrackingErrorInfeasible { achieved, limit }
    })?;

    for _ in 0..TE_BISECT_STEPS {
        if best_tv >= limit - tol || (hi - lo) <= 1e-12 * hi.max(1.0) {
            break;
        }
        steps += 1;
        let mid = 0.5 * (lo + hi);
        let (w, tv) = solve_at(mid)?;
        if tv <= limit + tol {
            hi = mid;
            best_w = w;
            best_tv = tv;
            best_nu = mid;
        } else {
            lo = mid;
        }
    }
    Ok(TrackingErrorSolution {
        weights: best_w,
        tracking_variance: best_tv,
        penalty: best_nu,
        bisection_steps: steps,
    })
}
