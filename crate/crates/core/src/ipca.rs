//! Characteristic-instrumented factor model estimated by alternating
//! least squares.
//!
//! Returns are modeled as `r_{t+1} = Z_t Gamma f_{t+1} + eps`, where `Z_t`
//! is the N x L characteristics matrix observed one period ahead of the
//! returns it instruments, `Gamma` maps characteristics into K factor
//! loadings, and `f_{t+1}` are latent factors. The fit alternates exact
//! least-squares updates of the per-date factors and of `Gamma`
//! (Kronecker-product normal equations), then applies the orthonormal
//! rotation that makes `Gamma' Gamma = I` and the factor second-moment
//! matrix diagonal with nonincreasing entries. The restricted model is
//! used throughout: no characteristic-driven intercept.

use crate::covariance::{sorted_symmetric_eigen, CovarianceEstimate, Diagnostics, EstimatorKind};
use crate::data::{CharacteristicsPanel, ReturnsPanel};
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum IpcaError {
    #[error("factor rank must satisfy 1 <= K <= L, got K = {k}, L = {l}")]
    RankBounds { k: usize, l: usize },
    #[error("need at least 3 periods to fit (T = {t})")]
    TooFewPeriods { t: usize },
    #[error("returns and characteristics panels are misaligned: {0}")]
    MisalignedPanels(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("model must be fitted before computing a covariance")]
    Unfitted,
    #[error("total sum of squares is zero")]
    ZeroTotalSumOfSquares,
}

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_SWEEPS: usize = 500;

/// Fitted loading map, factor path and estimation diagnostics.
#[derive(Debug, Clone)]
pub struct IpcaModel {
    /// L x K characteristic-to-loading map with orthonormal columns.
    pub gamma: DMatrix<f64>,
    /// K x (T-1) factor estimates; column t predicts return date t+1.
    pub factors: DMatrix<f64>,
    pub rank: usize,
    /// Objective value after every half-sweep (factor step, Gamma step).
    pub objective_path: Vec<f64>,
    /// Diagonal of the residual covariance.
    pub residual_variances: DVector<f64>,
    /// Sample covariance of the fitted factors (1/(T-2) normalization).
    pub factor_covariance: DMatrix<f64>,
    pub converged: bool,
    pub sweeps: usize,
    /// true when a singular per-date system needed a ridge fallback
    pub ridge_stabilized: bool,
}

fn check_alignment(
    returns: &ReturnsPanel,
    chars: &CharacteristicsPanel,
) -> Result<(), IpcaError> {
    if returns.dates() != chars.dates() {
        return Err(IpcaError::MisalignedPanels(
            "date grids differ".to_string(),
        ));
    }
    if returns.assets() != chars.assets() {
        return Err(IpcaError::MisalignedPanels(
            "asset orderings differ".to_string(),
        ));
    }
    Ok(())
}

/// Per-date factor update: `f_{t+1} = (G'G)^{-1} G' r_{t+1}` with
/// `G = Z_t Gamma`. Ridge-stabilized when the Gram matrix is singular.
fn factor_step(
    z_mats: &[&DMatrix<f64>],
    returns_next: &[DVector<f64>],
    gamma: &DMatrix<f64>,
    factors: &mut DMatrix<f64>,
    ridge_used: &mut bool,
) {
    let k = gamma.ncols();
    for (t, (z, r)) in z_mats.iter().zip(returns_next).enumerate() {
        let g = *z * gamma; // N x K
        let gram = g.transpose() * &g;
        let rhs = g.transpose() * r;
        let f = match Cholesky::new(gram.clone()) {
            Some(chol) => chol.solve(&rhs),
            None => {
                *ridge_used = true;
                let ridge = 1e-10 * (gram.trace() / k as f64).max(1e-300) + 1e-30;
                let stabilized = gram + DMatrix::identity(k, k) * ridge;
                Cholesky::new(stabilized)
                    .map(|c| c.solve(&rhs))
                    .unwrap_or_else(|| DVector::zeros(k))
            }
        };
        factors.set_column(t, &f);
    }
}

/// Gamma update through the stacked normal equations
/// `(sum_t Z'Z kron f f') vec(Gamma') = sum_t (Z kron f')' r`.
fn gamma_step(
    z_mats: &[&DMatrix<f64>],
    returns_next: &[DVector<f64>],
    factors: &DMatrix<f64>,
    l: usize,
    k: usize,
    ridge_used: &mut bool,
) -> DMatrix<f64> {
    let dim = l * k;
    let mut lhs: DMatrix<f64> = DMatrix::zeros(dim, dim);
    let mut rhs: DVector<f64> = DVector::zeros(dim);
    for (t, (z, r)) in z_mats.iter().zip(returns_next).enumerate() {
        let f = factors.column(t);
        let zz = z.transpose() * *z; // L x L
        let ff = &f * f.transpose(); // K x K
        for a in 0..l {
            for b in 0..l {
                let w = zz[(a, b)];
                if w == 0.0 {
                    continue;
                }
                for p in 0..k {
                    for q in 0..k {
                        lhs[(a * k + p, b * k + q)] += w * ff[(p, q)];
                    }
                }
            }
        }
        let zr = z.transpose() * r; // L
        for a in 0..l {
            for p in 0..k {
                rhs[a * k + p] += zr[a] * f[p];
            }
        }
    }
    let solution = match Cholesky::new(lhs.clone()) {
        Some(chol) => chol.solve(&rhs),
        None => {
            *ridge_used = true;
            let ridge = 1e-10 * (lhs.trace() / dim as f64).max(1e-300) + 1e-30f64;
            let stabilized = lhs + DMatrix::identity(dim, dim) * ridge;
            Cholesky::new(stabilized)
                .map(|c| c.solve(&rhs))
                .unwrap_or_else(|| DVector::zeros(dim))
        }
    };
    DMatrix::from_fn(l, k, |a, p| solution[a * k + p])
}

fn objective(
    z_mats: &[&DMatrix<f64>],
    returns_next: &[DVector<f64>],
    gamma: &DMatrix<f64>,
    factors: &DMatrix<f64>,
) -> f64 {
    let mut acc = 0.0;
    for (t, (z, r)) in z_mats.iter().zip(returns_next).enumerate() {
        let fitted = *z * gamma * factors.column(t);
        acc += (r - fitted).norm_squared();
    }
    acc
}

/// Warm start: top-K eigenvectors of the second-moment matrix of the
/// characteristic-managed portfolios `x_{t+1} = Z_t' r_{t+1}`.
fn initial_gamma(
    z_mats: &[&DMatrix<f64>],
    returns_next: &[DVector<f64>],
    l: usize,
    k: usize,
) -> DMatrix<f64> {
    let mut moment = DMatrix::zeros(l, l);
    for (z, r) in z_mats.iter().zip(returns_next) {
        let x = z.transpose() * r;
        moment += &x * x.transpose();
    }
    moment /= z_mats.len() as f64;
    let (_, vectors) = sorted_symmetric_eigen(&moment);
    // ascending order: the top-K are the last K columns
    let mut gamma = DMatrix::zeros(l, k);
    for j in 0..k {
        gamma.set_column(j, &vectors.column(l - 1 - j));
    }
    gamma
}

pub(crate) fn als_from(
    gamma0: DMatrix<f64>,
    z_mats: &[&DMatrix<f64>],
    returns_next: &[DVector<f64>],
    rank: usize,
    tol: f64,
    max_sweeps: usize,
) -> IpcaModel {
    let l = gamma0.nrows();
    let t_obs = returns_next.len();
    let mut gamma = gamma0;
    let mut factors = DMatrix::zeros(rank, t_obs);
    let mut objective_path = Vec::new();
    let mut ridge_used = false;
    let mut converged = false;
    let mut sweeps = 0;
    let mut prev = f64::INFINITY;

    while sweeps < max_sweeps {
        sweeps += 1;
        factor_step(z_mats, returns_next, &gamma, &mut factors, &mut ridge_used);
        objective_path.push(objective(z_mats, returns_next, &gamma, &factors));
        gamma = gamma_step(z_mats, returns_next, &factors, l, rank, &mut ridge_used);
        let obj = objective(z_mats, returns_next, &gamma, &factors);
        objective_path.push(obj);
        if prev.is_finite() {
            let denom = prev.abs().max(1e-300);
            if (prev - obj).abs() <= tol * denom {
                converged = true;
                break;
            }
        }
        prev = obj;
    }

    // identification: Gamma'Gamma = I, then factor second moments diagonal
    // with nonincreasing entries, then a sign convention per column
    let gtg = gamma.transpose() * &gamma;
    let (vals, vecs) = sorted_symmetric_eigen(&gtg);
    let half = &vecs
        * DMatrix::from_diagonal(&vals.map(|v| v.max(1e-300).sqrt()))
        * vecs.transpose();
    let half_inv = &vecs
        * DMatrix::from_diagonal(&vals.map(|v| 1.0 / v.max(1e-300).sqrt()))
        * vecs.transpose();
    let mut gamma_o = &gamma * &half_inv;
    let mut factors_o = half * &factors;

    let ff = &factors_o * factors_o.transpose();
    let (fvals, fvecs) = sorted_symmetric_eigen(&ff);
    let mut rot = DMatrix::zeros(rank, rank);
    for j in 0..rank {
        rot.set_column(j, &fvecs.column(rank - 1 - j));
    }
    let _ = fvals;
    gamma_o = gamma_o * &rot;
    factors_o = rot.transpose() * factors_o;
    for j in 0..rank {
        let col = gamma_o.column(j);
        let mut idx = 0;
        let mut best = 0.0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                idx = i;
            }
        }
        if gamma_o[(idx, j)] < 0.0 {
            gamma_o.column_mut(j).neg_mut();
            factors_o.row_mut(j).neg_mut();
        }
    }

    // residual variances (diagonal of the residual covariance) and the
    // factor covariance, both with mean subtraction
    let n = returns_next[0].len();
    let mut residuals = DMatrix::zeros(t_obs, n);
    for (t, (z, r)) in z_mats.iter().zip(returns_next).enumerate() {
        let fitted = *z * &gamma_o * factors_o.column(t);
        for i in 0..n {
            residuals[(t, i)] = r[i] - fitted[i];
        }
    }
    let residual_variances = column_variances(&residuals);
    let factor_covariance = sample_covariance_rows(&factors_o);

    IpcaModel {
        gamma: gamma_o,
        factors: factors_o,
        rank,
        objective_path,
        residual_variances,
        factor_covariance,
        converged,
        sweeps,
        ridge_stabilized: ridge_used,
    }
}

/// Column variances with mean subtraction, 1/(rows-1) normalization.
fn column_variances(m: &DMatrix<f64>) -> DVector<f64> {
    let rows = m.nrows();
    DVector::from_fn(m.ncols(), |j, _| {
        let col = m.column(j);
        let mean = col.sum() / rows as f64;
        col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (rows as f64 - 1.0)
    })
}

/// Sample covariance of the columns of a K x T matrix (each column one
/// observation), 1/(T-1) normalization.
fn sample_covariance_rows(f: &DMatrix<f64>) -> DMatrix<f64> {
    let k = f.nrows();
    let t = f.ncols();
    let mut means = DVector::zeros(k);
    for j in 0..t {
        means += f.column(j);
    }
    means /= t as f64;
    let mut cov = DMatrix::zeros(k, k);
    for j in 0..t {
        let d = f.column(j) - &means;
        cov += &d * d.transpose();
    }
    cov / (t as f64 - 1.0)
}

/// Fits the restricted model with predictive alignment: characteristics at
/// date t instrument the returns at date t+1.
pub fn fit_ipca(
    returns: &ReturnsPanel,
    chars: &CharacteristicsPanel,
    rank: usize,
    tol: f64,
    max_sweeps: usize,
) -> Result<IpcaModel, IpcaError> {
    check_alignment(returns, chars)?;
    let l = chars.n_characteristics();
    if rank == 0 || rank > l {
        return Err(IpcaError::RankBounds { k: rank, l });
    }
    let t = returns.n_periods();
    if t < 3 {
        return Err(IpcaError::TooFewPeriods { t });
    }
    let n = returns.n_assets();
    let z_mats: Vec<&DMatrix<f64>> = (0..t - 1).map(|i| chars.matrix(i)).collect();
    let returns_next: Vec<DVector<f64>> = (1..t)
        .map(|i| DVector::from_fn(n, |j, _| returns.values()[(i, j)]))
        .collect();
    let gamma0 = initial_gamma(&z_mats, &returns_next, l, rank);
    Ok(als_from(gamma0, &z_mats, &returns_next, rank, tol, max_sweeps))
}

/// Conditional covariance `Z Gamma cov(F) Gamma' Z' + diag(residual
/// variances)` for the characteristics observed at the forecast origin.
pub fn ipca_covariance(
    model: &IpcaModel,
    z: &DMatrix<f64>,
) -> Result<CovarianceEstimate, IpcaError> {
    if z.ncols() != model.gamma.nrows() {
        return Err(IpcaError::DimensionMismatch(format!(
            "characteristics have {} columns, model expects {}",
            z.ncols(),
            model.gamma.nrows()
        )));
    }
    if z.nrows() != model.residual_variances.len() {
        return Err(IpcaError::DimensionMismatch(format!(
            "characteristics cover {} assets, model has {}",
            z.nrows(),
            model.residual_variances.len()
        )));
    }
    let loadings = z * &model.gamma;
    let mut matrix = &loadings * &model.factor_covariance * loadings.transpose();
    for i in 0..z.nrows() {
        matrix[(i, i)] += model.residual_variances[i];
    }
    for i in 0..z.nrows() {
        for j in 0..i {
            let v = 0.5 * (matrix[(i, j)] + matrix[(j, i)]);
            matrix[(i, j)] = v;
            matrix[(j, i)] = v;
        }
    }
    Ok(CovarianceEstimate {
        matrix,
        estimator: EstimatorKind::Ipca,
        diagnostics: Diagnostics::Ipca { rank: model.rank },
    })
}

/// In-sample fit measure: `1 - SSR / SST` over all predicted dates, with
/// an uncentered total sum of squares.
pub fn ipca_total_r2(
    model: &IpcaModel,
    returns: &ReturnsPanel,
    chars: &CharacteristicsPanel,
) -> Result<f64, IpcaError> {
    check_alignment(returns, chars)?;
    let t = returns.n_periods();
    if t < 2 {
        return Err(IpcaError::TooFewPeriods { t });
    }
    if model.factors.ncols() != t - 1 {
        return Err(IpcaError::DimensionMismatch(format!(
            "model spans {} prediction dates, panel has {}",
            model.factors.ncols(),
            t - 1
        )));
    }
    let n = returns.n_assets();
    let mut ssr = 0.0;
    let mut sst = 0.0;
    for idx in 0..t - 1 {
        let r = DVector::from_fn(n, |j, _| returns.values()[(idx + 1, j)]);
        let fitted = chars.matrix(idx) * &model.gamma * model.factors.column(idx);
        ssr += (&r - fitted).norm_squared();
        sst += r.norm_squared();
    }
    if sst == 0.0 {
        return Err(IpcaError::ZeroTotalSumOfSquares);
    }
    Ok(1.0 - ssr / sst)
}

/// Wire image of a fitted model.
#[derive(Serialize, Deserialize)]
pub struct IpcaModelJson {
    pub rank: usize,
    pub n_characteristics: usize,
    pub gamma_row_major: Vec<f64>,
    pub factors_row_major: Vec<f64>,
    pub residual_variances: Vec<f64>,
    pub factor_covariance_row_major: Vec<f64>,
    pub objective_path: Vec<f64>,
    pub converged: bool,
    pub sweeps: usize,
    pub ridge_stabilized: bool,
}

impl IpcaModel {
    pub fn to_json(&self) -> IpcaModelJson {
        let row_major = |m: &DMatrix<f64>| {
            (0..m.nrows())
                .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
                .map(|(i, j)| m[(i, j)])
                .collect::<Vec<f64>>()
        };
        IpcaModelJson {
            rank: self.rank,
            n_characteristics: self.gamma.nrows(),
            gamma_row_major: row_major(&self.gamma),
            factors_row_major: row_major(&self.factors),
            residual_variances: self.residual_variances.as_slice().to_vec(),
            factor_covariance_row_major: row_major(&self.factor_covariance),
            objective_path: self.objective_path.clone(),
            converged: self.converged,
            sweeps: self.sweeps,
            ridge_stabilized: self.ridge_stabilized,
        }
    }
}

/// Largest principal angle (radians) between the column spaces of two
/// orthonormal-ish matrices; used by the recovery tests.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = orthonormal_basis(a);
    let qb = orthonormal_basis(b);
    let m = qa.transpose() * qb;
    let svd = m.svd(false, false);
    let min_sv = svd
        .singular_values
        .iter()
        .fold(f64::MAX, |acc, &v| acc.min(v));
    min_sv.clamp(-1.0, 1.0).acos()
}

fn orthonormal_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = a.clone().qr();
    qr.q().columns(0, a.ncols()).into_owned()
}
