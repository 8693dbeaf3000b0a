//! Convex quadratic programs in standard form and an ADMM solver.
//!
//! Problems are
//!
//! ```text
//!   minimize    (1/2) x' P x + q' x
//!   subject to  l <= A x <= u
//! ```
//!
//! with `P` symmetric positive semidefinite. Equalities are rows with
//! `l == u`; one-sided rows use IEEE infinities for the missing bound. The
//! solver follows the operator-splitting scheme of the OSQP solver
//! (Stellato, Banjac, Goulart, Bemporad, Boyd, "OSQP: an operator
//! splitting solver for quadratic programs", 2020): Ruiz equilibration,
//! a cached sparse LDL' factorization of the KKT system reused across
//! iterations, over-relaxation, residual-balancing step-size adaptation,
//! and an optional active-set polish step.

use crate::sparse::CscMatrix;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

mod polish;
mod solver;

pub use solver::solve_qp;

#[derive(Error, Debug)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(
        "cost matrix is not symmetric: |P[{i},{j}] - P[{j},{i}]| = {diff:.3e} exceeds {tol:.3e}"
    )]
    NotSymmetric {
        i: usize,
        j: usize,
        diff: f64,
        tol: f64,
    },
    #[error("row {row}: lower bound {lower} exceeds upper bound {upper}")]
    BoundOrder { row: usize, lower: f64, upper: f64 },
    #[error("row {row}: bound is NaN or has an invalid infinite sign")]
    BadBound { row: usize },
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
    #[error("KKT factorization failed: {0}")]
    Factorization(#[from] crate::ldl::LdlError),
    #[error("sparse matrix error: {0}")]
    Sparse(#[from] crate::sparse::SparseError),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Relative symmetry tolerance for the cost matrix.
const SYMMETRY_TOL: f64 = 1e-12;

/// A QP in standard form. Immutable after construction and safe to share
/// across threads; independent solves do not interact.
#[derive(Debug, Clone)]
pub struct QpProblem {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: CscMatrix,
    l: DVector<f64>,
    u: DVector<f64>,
}

impl QpProblem {
    /// Builds a problem from a dense cost matrix and a sparse constraint
    /// matrix. `P` must be symmetric within a 1e-12 relative tolerance;
    /// it is symmetrized exactly for internal use.
    pub fn new(
        p: DMatrix<f64>,
        q: DVector<f64>,
        a: CscMatrix,
        l: DVector<f64>,
        u: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = p.nrows();
        if p.ncols() != n {
            return Err(QpError::DimensionMismatch(format!(
                "P is {}x{}, expected square",
                p.nrows(),
                p.ncols()
            )));
        }
        if q.len() != n {
            return Err(QpError::DimensionMismatch(format!(
                "q has {} entries, expected {n}",
                q.len()
            )));
        }
        if a.ncols() != n {
            return Err(QpError::DimensionMismatch(format!(
                "A has {} columns, expected {n}",
                a.ncols()
            )));
        }
        let m = a.nrows();
        if l.len() != m || u.len() != m {
            return Err(QpError::DimensionMismatch(format!(
                "bounds have {}/{} entries, expected {m}",
                l.len(),
                u.len()
            )));
        }

        let scale = p.amax();
        let tol = SYMMETRY_TOL * scale.max(1.0);
        for j in 0..n {
            for i in 0..j {
                let diff = (p[(i, j)] - p[(j, i)]).abs();
                if diff > tol {
                    return Err(QpError::NotSymmetric { i, j, diff, tol });
                }
            }
        }
        let mut p = p;
        for j in 0..n {
            for i in 0..j {
                let v = 0.5 * (p[(i, j)] + p[(j, i)]);
                p[(i, j)] = v;
                p[(j, i)] = v;
            }
        }

        for row in 0..m {
            let (lo, hi) = (l[row], u[row]);
            if lo.is_nan() || hi.is_nan() || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
                return Err(QpError::BadBound { row });
            }
            if lo > hi {
                return Err(QpError::BoundOrder {
                    row,
                    lower: lo,
                    upper: hi,
                });
            }
        }

        Ok(Self { p, q, a, l, u })
    }

    /// Convenience constructor taking a dense constraint matrix.
    pub fn with_dense_a(
        p: DMatrix<f64>,
        q: DVector<f64>,
        a: &DMatrix<f64>,
        l: DVector<f64>,
        u: DVector<f64>,
    ) -> Result<Self, QpError> {
        Self::new(p, q, CscMatrix::from_dense(a), l, u)
    }

    pub fn n(&self) -> usize {
        self.p.nrows()
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn a(&self) -> &CscMatrix {
        &self.a
    }

    pub fn l(&self) -> &DVector<f64> {
        &self.l
    }

    pub fn u(&self) -> &DVector<f64> {
        &self.u
    }

    /// (1/2) x' P x + q' x
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.p * x)[(0, 0)] + self.q.dot(x)
    }

    pub fn to_json(&self) -> Result<String, QpError> {
        let dto = QpProblemJson::from(self);
        Ok(serde_json::to_string_pretty(&dto)?)
    }

    pub fn from_json(text: &str) -> Result<Self, QpError> {
        let dto: QpProblemJson = serde_json::from_str(text)?;
        dto.into_problem()
    }
}

#[derive(Serialize, Deserialize)]
struct TripletJson {
    row: usize,
    col: usize,
    value: f64,
}

/// Wire format for test fixtures and debugging. Missing (infinite) bounds
/// are encoded as `null`: in `l` that means -inf, in `u` +inf.
#[derive(Serialize, Deserialize)]
struct QpProblemJson {
    n: usize,
    m: usize,
    p: Vec<f64>,
    q: Vec<f64>,
    a: Vec<TripletJson>,
    l: Vec<Option<f64>>,
    u: Vec<Option<f64>>,
}

impl From<&QpProblem> for QpProblemJson {
    fn from(problem: &QpProblem) -> Self {
        let n = problem.n();
        let m = problem.m();
        let mut p = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                p.push(problem.p[(i, j)]);
            }
        }
        QpProblemJson {
            n,
            m,
            p,
            q: problem.q.as_slice().to_vec(),
            a: problem
                .a
                .triplets()
                .map(|(row, col, value)| TripletJson { row, col, value })
                .collect(),
            l: problem
                .l
                .iter()
                .map(|&v| if v.is_finite() { Some(v) } else { None })
                .collect(),
            u: problem
                .u
                .iter()
                .map(|&v| if v.is_finite() { Some(v) } else { None })
                .collect(),
        }
    }
}

impl QpProblemJson {
    fn into_problem(self) -> Result<QpProblem, QpError> {
        if self.p.len() != self.n * self.n {
            return Err(QpError::DimensionMismatch(format!(
                "P has {} entries, expected {}",
                self.p.len(),
                self.n * self.n
            )));
        }
        let p = DMatrix::from_row_slice(self.n, self.n, &self.p);
        let q = DVector::from_vec(self.q);
        let triplets: Vec<(usize, usize, f64)> =
            self.a.iter().map(|t| (t.row, t.col, t.value)).collect();
        let a = CscMatrix::from_triplets(self.m, self.n, &triplets)?;
        let l = DVector::from_iterator(
            self.l.len(),
            self.l.iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)),
        );
        let u = DVector::from_iterator(
            self.u.len(),
            self.u.iter().map(|v| v.unwrap_or(f64::INFINITY)),
        );
        QpProblem::new(p, q, a, l, u)
    }
}

/// Solver settings. `DEFAULT` mirrors stock operator-splitting solver
/// defaults; `HIGH` runs to 1e-8 tolerances with up to 10^4 iterations and
/// polishes the active set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpSettings {
    pub max_iter: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_prim_inf: f64,
    pub eps_dual_inf: f64,
    /// ADMM step size.
    pub rho: f64,
    /// KKT regularization added to the P block.
    pub sigma: f64,
    /// Over-relaxation in (0, 2).
    pub alpha: f64,
    pub polish: bool,
    /// Ruiz equilibration passes; 0 disables scaling.
    pub scaling_iters: usize,
    pub adaptive_rho: bool,
}

impl QpSettings {
    pub const DEFAULT: QpSettings = QpSettings {
        max_iter: 4000,
        eps_abs: 1e-3,
        eps_rel: 1e-3,
        eps_prim_inf: 1e-4,
        eps_dual_inf: 1e-4,
        rho: 0.1,
        sigma: 1e-6,
        alpha: 1.6,
        polish: false,
        scaling_iters: 10,
        adaptive_rho: true,
    };

    pub const HIGH: QpSettings = QpSettings {
        max_iter: 10_000,
        eps_abs: 1e-8,
        eps_rel: 1e-8,
        polish: true,
        ..Self::DEFAULT
    };

    pub(crate) fn validate(&self) -> Result<(), QpError> {
        if self.max_iter == 0 {
            return Err(QpError::InvalidSettings("max_iter must be >= 1".into()));
        }
        if !(self.eps_abs > 0.0) || !(self.eps_rel > 0.0) {
            return Err(QpError::InvalidSettings(
                "eps_abs and eps_rel must be positive".into(),
            ));
        }
        if !(self.rho > 0.0) || !(self.sigma > 0.0) {
            return Err(QpError::InvalidSettings(
                "rho and sigma must be positive".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(QpError::InvalidSettings("alpha must lie in (0, 2)".into()));
        }
        Ok(())
    }
}

impl Default for QpSettings {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Solved,
    MaxIterReached,
    PrimalInfeasible,
    DualInfeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub objective: f64,
    /// true when the polish step ran and was accepted
    pub polished: bool,
}

/// KKT residual report for a candidate primal/dual pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KktReport {
    /// inf-norm of Ax - clamp(Ax, l, u)
    pub primal: f64,
    /// inf-norm of Px + q + A'y
    pub dual: f64,
    /// complementary-slackness gap |sum_i y_i ((Ax)_i - active bound_i)|
    pub gap: f64,
    pub eps_primal: f64,
    pub eps_dual: f64,
}

/// Evaluates the residuals the termination criterion is built on. Pure;
/// does not mutate the solution.
pub fn check_kkt(
    problem: &QpProblem,
    solution: &QpSolution,
    settings: &QpSettings,
) -> Result<KktReport, QpError> {
    if solution.x.len() != problem.n() || solution.y.len() != problem.m() {
        return Err(QpError::DimensionMismatch(format!(
            "solution has {} primal / {} dual entries, expected {} / {}",
            solution.x.len(),
            solution.y.len(),
            problem.n(),
            problem.m()
        )));
    }
    let ax = problem.a.mul_vec(&solution.x);
    let mut primal = 0.0f64;
    let mut z_norm = 0.0f64;
    let mut gap = 0.0f64;
    for i in 0..problem.m() {
        let z = ax[i].clamp(problem.l[i], problem.u[i]);
        primal = primal.max((ax[i] - z).abs());
        z_norm = z_norm.max(z.abs());
        let y = solution.y[i];
        if y != 0.0 {
            let bound = if y > 0.0 { problem.u[i] } else { problem.l[i] };
            if bound.is_finite() {
                gap += y * (ax[i] - bound);
            } else {
                gap += y * ax[i];
            }
        }
    }
    gap = gap.abs();

    let px = &problem.p * &solution.x;
    let aty = problem.a.tr_mul_vec(&solution.y);
    let dual = (&px + &problem.q + &aty).amax();

    let eps_primal = settings.eps_abs + settings.eps_rel * ax.amax().max(z_norm);
    let eps_dual = settings.eps_abs
        + settings.eps_rel * px.amax().max(problem.q.amax()).max(aty.amax());
    Ok(KktReport {
        primal,
        dual,
        gap,
        eps_primal,
        eps_dual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn budget_simplex_problem() -> QpProblem {
        // min 1/2 x'Ix on {1'x = 1, x >= 0}
        let p = DMatrix::identity(2, 2);
        let q = DVector::zeros(2);
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        let l = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let u = DVector::from_vec(vec![1.0, f64::INFINITY, f64::INFINITY]);
        QpProblem::with_dense_a(p, q, &a, l, u).unwrap()
    }

    #[test]
    fn bound_order_is_validated() {
        let p = DMatrix::identity(1, 1);
        let q = DVector::zeros(1);
        let a = DMatrix::from_row_slice(1, 1, &[1.0]);
        let l = DVector::from_vec(vec![1.0]);
        let u = DVector::from_vec(vec![0.0]);
        let err = QpProblem::with_dense_a(p, q, &a, l, u).unwrap_err();
        assert!(matches!(err, QpError::BoundOrder { row: 0, .. }));
    }

    #[test]
    fn asymmetric_p_is_rejected() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 1.0]);
        let q = DVector::zeros(2);
        let a = CscMatrix::zeros(0, 2);
        let l = DVector::zeros(0);
        let u = DVector::zeros(0);
        assert!(matches!(
            QpProblem::new(p, q, a, l, u),
            Err(QpError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn json_round_trip_preserves_infinities() {
        let problem = budget_simplex_problem();
        let text = problem.to_json().unwrap();
        let back = QpProblem::from_json(&text).unwrap();
        assert_eq!(back.n(), 2);
        assert_eq!(back.m(), 3);
        assert_eq!(back.u()[1], f64::INFINITY);
        assert_eq!(back.l()[1], 0.0);
        assert_abs_diff_eq!((back.p() - problem.p()).amax(), 0.0);
    }

    #[test]
    fn kkt_report_flags_infeasible_point() {
        // x = 0 violates the budget row by exactly 1
        let problem = budget_simplex_problem();
        let sol = QpSolution {
            x: DVector::zeros(2),
            y: DVector::zeros(3),
            status: QpStatus::Solved,
            iterations: 0,
            objective: 0.0,
            polished: false,
        };
        let report = check_kkt(&problem, &sol, &QpSettings::DEFAULT).unwrap();
        assert_abs_diff_eq!(report.primal, 1.0);
        assert_abs_diff_eq!(report.dual, 0.0);
    }

    #[test]
    fn dual_residual_grows_linearly_in_perturbation() {
        let problem = budget_simplex_problem();
        let exact = DVector::from_vec(vec![0.5, 0.5]);
        let y = DVector::from_vec(vec![-0.5, 0.0, 0.0]);
        let base = QpSolution {
            x: exact.clone(),
            y: y.clone(),
            status: QpStatus::Solved,
            iterations: 0,
            objective: 0.25,
            polished: false,
        };
        let r0 = check_kkt(&problem, &base, &QpSettings::DEFAULT).unwrap();
        assert!(r0.dual < 1e-12);
        for eps in [1e-4, 1e-2] {
            let mut x = exact.clone();
            x[0] += eps;
            let sol = QpSolution { x, ..base.clone() };
            let r = check_kkt(&problem, &sol, &QpSettings::DEFAULT).unwrap();
            assert_abs_diff_eq!(r.dual, eps, epsilon = 1e-12);
        }
    }
}
