//! Reduction of portfolio specifications to standard-form QPs.

use super::{
    AuxPurpose, Objective, PortfolioError, PortfolioSpec, ReformulatedQp, VariableLayout,
};
use crate::covariance::sorted_symmetric_eigen;
use crate::qp::{solve_qp, QpProblem, QpSettings, QpSolution, QpStatus};
use crate::sparse::CscMatrix;
use nalgebra::{DMatrix, DVector};

/// Eigenvalues below this fraction of the largest are floored before the
/// l2 shift, repairing singular covariance estimates.
const EIGENVALUE_FLOOR_RATIO: f64 = 1e-12;
/// A feasible portfolio must beat the risk-free rate by this much.
const EXCESS_RETURN_TOL: f64 = 1e-10;

struct RowBuilder {
    triplets: Vec<(usize, usize, f64)>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl RowBuilder {
    fn new() -> Self {
        Self {
            triplets: Vec::new(),
            lower: Vec::new(),
            upper: Vec::new(),
        }
    }

    fn push(&mut self, coeffs: &[(usize, f64)], lower: f64, upper: f64) {
        let row = self.lower.len();
        for &(col, v) in coeffs {
            if v != 0.0 {
                self.triplets.push((row, col, v));
            }
        }
        self.lower.push(lower);
        self.upper.push(upper);
    }

    /// Emits a constraint stated in portfolio space. Without
    /// homogenization it is the row itself; with homogenization the
    /// constant bounds move onto the scale variable:
    /// `lo <= a'w <= hi` becomes `a'wt - lo*gamma >= 0` and
    /// `a'wt - hi*gamma <= 0`.
    fn push_portfolio_row(
        &mut self,
        coeffs: &[(usize, f64)],
        lower: f64,
        upper: f64,
        gamma: Option<usize>,
    ) {
        match gamma {
            None => self.push(coeffs, lower, upper),
            Some(g) => {
                if lower == upper {
                    let mut c = coeffs.to_vec();
                    if lower != 0.0 {
                        c.push((g, -lower));
                    }
                    self.push(&c, 0.0, 0.0);
                } else {
                    if lower.is_finite() {
                        let mut c = coeffs.to_vec();
                        if lower != 0.0 {
                            c.push((g, -lower));
                        }
                        self.push(&c, 0.0, f64::INFINITY);
                    }
                    if upper.is_finite() {
                        let mut c = coeffs.to_vec();
                        if upper != 0.0 {
                            c.push((g, -upper));
                        }
                        self.push(&c, f64::NEG_INFINITY, 0.0);
                    }
                }
            }
        }
    }

    fn finish(self, total_vars: usize) -> Result<(CscMatrix, DVector<f64>, DVector<f64>), PortfolioError> {
        let m = self.lower.len();
        let a = CscMatrix::from_triplets(m, total_vars, &self.triplets)
            .map_err(crate::qp::QpError::from)?;
        Ok((
            a,
            DVector::from_vec(self.lower),
            DVector::from_vec(self.upper),
        ))
    }
}

/// All constraint rows shared by every objective. The split-variable and
/// auxiliary machinery depends only on the layout.
fn emit_constraint_rows(
    spec: &PortfolioSpec,
    layout: &VariableLayout,
    rows: &mut RowBuilder,
) {
    let n = layout.n_assets;
    let gamma = layout.gamma_index();
    let cons = &spec.constraints;

    // budget: w'1 = 1
    let budget: Vec<(usize, f64)> = (0..n).map(|j| (j, 1.0)).collect();
    rows.push_portfolio_row(&budget, 1.0, 1.0, gamma);

    if let Objective::MeanVariance { target_mean } = spec.objective {
        let mu = spec.mean.as_ref().expect("validated");
        let coeffs: Vec<(usize, f64)> = (0..n).map(|j| (j, mu[j])).collect();
        rows.push_portfolio_row(&coeffs, target_mean, f64::INFINITY, gamma);
    }

    if layout.split {
        let plus = layout.positive_part_offset().expect("split");
        let minus = layout.negative_part_offset().expect("split");
        for j in 0..n {
            // w - w+ + w- = 0
            rows.push(&[(j, 1.0), (plus + j, -1.0), (minus + j, 1.0)], 0.0, 0.0);
        }
        for j in 0..n {
            rows.push(&[(plus + j, 1.0)], 0.0, f64::INFINITY);
        }
        for j in 0..n {
            rows.push(&[(minus + j, 1.0)], 0.0, f64::INFINITY);
        }
        if let Some(theta) = cons.long_short {
            let long: Vec<(usize, f64)> = (0..n).map(|j| (plus + j, 1.0)).collect();
            rows.push_portfolio_row(&long, f64::NEG_INFINITY, 1.0 + theta, gamma);
            let short: Vec<(usize, f64)> = (0..n).map(|j| (minus + j, 1.0)).collect();
            rows.push_portfolio_row(&short, f64::NEG_INFINITY, theta, gamma);
        }
    }

    if let Some(b) = &cons.box_bounds {
        for j in 0..n {
            if b.lower[j].is_finite() || b.upper[j].is_finite() {
                rows.push_portfolio_row(&[(j, 1.0)], b.lower[j], b.upper[j], gamma);
            }
        }
    }

    if let Some(t) = &cons.turnover_individual {
        for j in 0..n {
            rows.push_portfolio_row(
                &[(j, 1.0)],
                t.previous[j] - t.limits[j],
                t.previous[j] + t.limits[j],
                gamma,
            );
        }
    }

    if let Some(f) = &cons.factor_exposure {
        let k = f.loadings.ncols();
        for factor in 0..k {
            let coeffs: Vec<(usize, f64)> = (0..n)
                .map(|j| (j, f.loadings[(j, factor)]))
                .filter(|&(_, v)| v != 0.0)
                .collect();
            match &f.rule {
                super::FactorRule::Neutralize => {
                    rows.push_portfolio_row(&coeffs, 0.0, 0.0, gamma);
                }
                super::FactorRule::Bound(bounds) => {
                    rows.push_portfolio_row(&coeffs, -bounds[factor], bounds[factor], gamma);
                }
            }
        }
    }

    if let Some(lin) = &cons.linear {
        for r in 0..lin.matrix.nrows() {
            let coeffs: Vec<(usize, f64)> = (0..n)
                .map(|j| (j, lin.matrix[(r, j)]))
                .filter(|&(_, v)| v != 0.0)
                .collect();
            rows.push_portfolio_row(&coeffs, f64::NEG_INFINITY, lin.upper[r], gamma);
        }
    }

    for &(purpose, offset) in &layout.aux {
        let (reference, limit) = match purpose {
            AuxPurpose::TurnoverTotal => {
                let t = cons.turnover_total.as_ref().expect("layout matches spec");
                (&t.previous, t.limit)
            }
            AuxPurpose::BenchmarkDistance => {
                let b = cons.benchmark_distance.as_ref().expect("layout matches spec");
                (&b.benchmark, b.limit)
            }
        };
        let plus = offset;
        let minus = offset + n;
        for j in 0..n {
            // w - d+ + d- = reference
            let coeffs = [(j, 1.0), (plus + j, -1.0), (minus + j, 1.0)];
            rows.push_portfolio_row(&coeffs, reference[j], reference[j], gamma);
        }
        for j in 0..2 * n {
            rows.push(&[(plus + j, 1.0)], 0.0, f64::INFINITY);
        }
        let total: Vec<(usize, f64)> = (0..2 * n).map(|j| (plus + j, 1.0)).collect();
        rows.push_portfolio_row(&total, f64::NEG_INFINITY, limit, gamma);
    }
}

/// Shifts every eigenvalue up by `lambda2`, flooring near-zero and
/// negative ones first so singular estimates become usable.
fn eigenvalue_shift(sigma: &DMatrix<f64>, lambda2: f64) -> DMatrix<f64> {
    let n = sigma.nrows();
    let (vals, vecs) = sorted_symmetric_eigen(sigma);
    let lam_max = vals[n - 1].max(0.0);
    let floor = EIGENVALUE_FLOOR_RATIO * lam_max;
    let shifted = DVector::from_fn(n, |i, _| vals[i].max(floor) + lambda2);
    let mut out = &vecs * DMatrix::from_diagonal(&shifted) * vecs.transpose();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

fn aux_blocks(spec: &PortfolioSpec) -> Vec<AuxPurpose> {
    let mut aux = Vec::new();
    if spec.constraints.turnover_total.is_some() {
        aux.push(AuxPurpose::TurnoverTotal);
    }
    if spec.constraints.benchmark_distance.is_some() {
        aux.push(AuxPurpose::BenchmarkDistance);
    }
    aux
}

/// Verifies that some feasible portfolio earns a strictly positive excess
/// return, by maximizing the unit-normalized excess direction (with a
/// vanishing ridge) over the original constraint set. The check is a sign
/// question, so a loose, capped solve suffices.
fn check_excess_return_feasible(
    spec: &PortfolioSpec,
    excess: &DVector<f64>,
) -> Result<(), PortfolioError> {
    let n = spec.n_assets();
    let split = spec.constraints.long_short.is_some();
    let layout = VariableLayout::new(n, split, false, &aux_blocks(spec));
    let total = layout.total_vars;

    let scale = excess.amax();
    if scale == 0.0 {
        return Err(PortfolioError::NoPositiveExcessReturn { best: 0.0 });
    }
    let p = DMatrix::identity(total, total) * 1e-6;
    let mut q = DVector::zeros(total);
    for j in 0..n {
        q[j] = -excess[j] / scale;
    }
    let mut rows = RowBuilder::new();
    let probe_spec = PortfolioSpec {
        objective: Objective::MinVariance,
        ..spec.clone()
    };
    emit_constraint_rows(&probe_spec, &layout, &mut rows);
    let (a, l, u) = rows.finish(total)?;
    let problem = QpProblem::new(p, q, a, l, u)?;
    let settings = QpSettings {
        eps_abs: 1e-5,
        eps_rel: 1e-5,
        max_iter: 1500,
        polish: false,
        ..QpSettings::DEFAULT
    };
    let sol = solve_qp(&problem, &settings)?;
    match sol.status {
        QpStatus::Solved => {
            let best: f64 = (0..n).map(|j| excess[j] / scale * sol.x[j]).sum();
            if best > EXCESS_RETURN_TOL {
                Ok(())
            } else {
                Err(PortfolioError::NoPositiveExcessReturn { best: best * scale })
            }
        }
        QpStatus::PrimalInfeasible => Err(PortfolioError::Validation(
            "constraint set is infeasible".into(),
        )),
        // unbounded improvement or an inconclusive probe: proceed, the
        // main solve will surface genuine problems
        QpStatus::DualInfeasible | QpStatus::MaxIterReached => Ok(()),
    }
}

/// Maps the specification onto a standard-form QP. Tracking-error
/// constraints are rejected here; `solve_with_tracking_error` owns them.
pub fn build_qp(spec: &PortfolioSpec) -> Result<ReformulatedQp, PortfolioError> {
    build_with_penalty(spec, None)
}

/// Internal variant used by the tracking-error solver: adds
/// `penalty * (w - benchmark)' Sigma (w - benchmark)` to the objective.
pub(crate) fn build_with_penalty(
    spec: &PortfolioSpec,
    penalty: Option<(f64, &DVector<f64>)>,
) -> Result<ReformulatedQp, PortfolioError> {
    spec.validate()?;
    if spec.constraints.tracking_error.is_some() {
        return Err(PortfolioError::TrackingErrorNotHere);
    }
    let n = spec.n_assets();
    let reg = spec.regularization;

    let sigma_tilde = if reg.l2 > 0.0 {
        eigenvalue_shift(&spec.covariance, reg.l2)
    } else {
        spec.covariance.clone()
    };

    let homogenized = matches!(spec.objective, Objective::MaxSharpe { .. });
    let split = reg.l1 > 0.0 || spec.constraints.long_short.is_some();
    let layout = VariableLayout::new(n, split, homogenized, &aux_blocks(spec));
    let total = layout.total_vars;

    // The Sharpe objective is homogeneous of degree zero, so the excess
    // direction can be normalized to unit sup-norm; this keeps the lifted
    // variables near unit scale. The l1 strength is rescaled by the same
    // factor, which leaves the problem mathematically identical.
    let (excess, excess_scale) = if let Objective::MaxSharpe { riskfree_rate } = spec.objective {
        let mu = spec.mean.as_ref().expect("validated");
        let excess = mu - DVector::from_element(n, riskfree_rate);
        check_excess_return_feasible(spec, &excess)?;
        let scale = excess.amax();
        (Some(excess / scale), scale)
    } else {
        (None, 1.0)
    };
    debug_assert!(penalty.is_none() || !homogenized);

    let mut p = DMatrix::zeros(total, total);
    p.view_mut((0, 0), (n, n)).copy_from(&(&sigma_tilde * 2.0));
    let mut q = DVector::zeros(total);
    if let Some((nu, benchmark)) = penalty {
        let extra = &spec.covariance * (2.0 * nu);
        for i in 0..n {
            for j in 0..n {
                p[(i, j)] += extra[(i, j)];
            }
        }
        let lin = &spec.covariance * benchmark * (2.0 * nu);
        for j in 0..n {
            q[j] -= lin[j];
        }
    }
    if layout.split && reg.l1 > 0.0 {
        let l1_effective = reg.l1 * excess_scale;
        let plus = layout.positive_part_offset().expect("split");
        let minus = layout.negative_part_offset().expect("split");
        for j in 0..n {
            q[plus + j] = l1_effective;
            q[minus + j] = l1_effective;
        }
    }

    let mut rows = RowBuilder::new();
    if let Some(excess) = &excess {
        // normalization defining the scale: wt'(mu - rf 1) = 1
        let coeffs: Vec<(usize, f64)> = (0..n)
            .map(|j| (j, excess[j]))
            .filter(|&(_, v)| v != 0.0)
            .collect();
        rows.push(&coeffs, 1.0, 1.0);
    }
    emit_constraint_rows(spec, &layout, &mut rows);
    if let Some(g) = layout.gamma_index() {
        rows.push(&[(g, 1.0)], 0.0, f64::INFINITY);
    }
    let (a, l, u) = rows.finish(total)?;
    let qp = QpProblem::new(p, q, a, l, u)?;
    Ok(ReformulatedQp { qp, layout })
}

/// Builds, solves and recovers weights in one call.
#[derive(Debug, Clone)]
pub struct PortfolioSolution {
    pub weights: DVector<f64>,
    pub qp_solution: QpSolution,
}

pub fn solve_portfolio(
    spec: &PortfolioSpec,
    settings: &QpSettings,
) -> Result<PortfolioSolution, PortfolioError> {
    let reform = build_qp(spec)?;
    let qp_solution = solve_qp(&reform.qp, settings)?;
    let weights = super::recover_weights(&reform, &qp_solution)?;
    Ok(PortfolioSolution {
        weights,
        qp_solution,
    })
}
