//! Covariance estimators for return panels.
//!
//! Four estimators feed the portfolio layer: the plain sample covariance
//! (1/T normalization), Ledoit-Wolf linear shrinkage toward the scaled
//! identity with the plug-in intensity, nonlinear shrinkage of the sample
//! spectrum (quadratic-inverse family, kernel density plus Hilbert
//! transform), and the characteristic-driven factor covariance in
//! [`crate::ipca`]. `repair_singular` floors the spectrum of any estimate
//! so downstream factorizations succeed.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum CovarianceError {
    #[error("need at least {required} observations, got {got}")]
    TooFewObservations { required: usize, got: usize },
    #[error("missing or non-finite value at row {row}, column {col}")]
    MissingValue { row: usize, col: usize },
    #[error("returns are identically zero")]
    AllZeroReturns,
    #[error(
        "kernel estimator needs an effective sample of at least 12 when assets outnumber observations (N = {n_assets}, effective T = {effective})"
    )]
    KernelSampleTooSmall { n_assets: usize, effective: usize },
    #[error("matrix has no positive eigenvalue; cannot repair")]
    NonPositiveSpectrum,
    #[error("factor matrix is rank deficient")]
    RankDeficientFactors,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("I/O error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    Sample,
    LinearShrinkage,
    Qis,
    Ipca,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind")]
pub enum Diagnostics {
    None,
    LinearShrinkage {
        delta: f64,
        kappa: f64,
        pi_hat: f64,
        rho_hat: f64,
        gamma_hat: f64,
        /// trace(S)/N, the level of the shrinkage target
        target_scale: f64,
        /// true when the sample already equals the target (gamma = 0) and
        /// delta = 1 was set by convention
        degenerate_target: bool,
    },
    Qis {
        sample_eigenvalues: Vec<f64>,
        shrunk_eigenvalues: Vec<f64>,
        bandwidth: f64,
        concentration: f64,
    },
    Ipca {
        rank: usize,
    },
    Repaired {
        floored: usize,
        floor: f64,
        source: Box<Diagnostics>,
    },
}

/// A covariance matrix with its provenance and estimator diagnostics.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    pub matrix: DMatrix<f64>,
    pub estimator: EstimatorKind,
    pub diagnostics: Diagnostics,
}

impl CovarianceEstimate {
    /// Writes the dense matrix as CSV with an asset-id header row and a
    /// leading asset-id column.
    pub fn write_csv<W: Write>(&self, assets: &[String], out: W) -> Result<(), CovarianceError> {
        let n = self.matrix.nrows();
        if assets.len() != n {
            return Err(CovarianceError::DimensionMismatch(format!(
                "{} asset ids for a {n}x{n} matrix",
                assets.len()
            )));
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["asset_id".to_string()];
        header.extend_from_slice(assets);
        w.write_record(&header)
            .map_err(|e| CovarianceError::Io(e.to_string()))?;
        for i in 0..n {
            let mut record = vec![assets[i].clone()];
            for j in 0..n {
                record.push(format!("{}", self.matrix[(i, j)]));
            }
            w.write_record(&record)
                .map_err(|e| CovarianceError::Io(e.to_string()))?;
        }
        w.flush().map_err(|e| CovarianceError::Io(e.to_string()))?;
        Ok(())
    }

    pub fn diagnostics_json(&self) -> String {
        serde_json::json!({
            "estimator": self.estimator,
            "diagnostics": self.diagnostics,
        })
        .to_string()
    }
}

fn validate_panel(returns: &DMatrix<f64>, min_obs: usize) -> Result<(), CovarianceError> {
    let t = returns.nrows();
    if t < min_obs {
        return Err(CovarianceError::TooFewObservations {
            required: min_obs,
            got: t,
        });
    }
    for col in 0..returns.ncols() {
        for row in 0..t {
            if !returns[(row, col)].is_finite() {
                return Err(CovarianceError::MissingValue { row, col });
            }
        }
    }
    Ok(())
}

/// Returns the column-demeaned panel.
fn center_columns(returns: &DMatrix<f64>) -> DMatrix<f64> {
    let t = returns.nrows();
    let mut centered = returns.clone();
    for mut col in centered.column_iter_mut() {
        let mean = col.sum() / t as f64;
        col.add_scalar_mut(-mean);
    }
    centered
}

/// Sample covariance with 1/T normalization of the centered outer products.
pub fn sample_cov(returns: &DMatrix<f64>) -> Result<CovarianceEstimate, CovarianceError> {
    validate_panel(returns, 2)?;
    let t = returns.nrows() as f64;
    let centered = center_columns(returns);
    let matrix = centered.transpose() * &centered / t;
    Ok(CovarianceEstimate {
        matrix,
        estimator: EstimatorKind::Sample,
        diagnostics: Diagnostics::None,
    })
}

/// Linear shrinkage toward the scaled identity `trace(S)/N * I` with the
/// plug-in intensity `delta = clamp(kappa_hat / T, 0, 1)`,
/// `kappa_hat = (pi_hat - rho_hat) / gamma_hat`. The rho_hat correction
/// uses the average off-diagonal sample correlation.
pub fn linear_shrinkage(returns: &DMatrix<f64>) -> Result<CovarianceEstimate, CovarianceError> {
    validate_panel(returns, 2)?;
    let t = returns.nrows();
    let n = returns.ncols();
    let tf = t as f64;
    let x = center_columns(returns);
    let s = x.transpose() * &x / tf;
    let target_scale = s.trace() / n as f64;

    // pi_hat: sum over (i, j) of the empirical variance of the cross
    // products around s_ij
    let mut pi_hat = 0.0;
    let mut pi_diag = 0.0;
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for row in 0..t {
                let d = x[(row, i)] * x[(row, j)] - s[(i, j)];
                acc += d * d;
            }
            acc /= tf;
            if i == j {
                pi_hat += acc;
                pi_diag += acc;
            } else {
                pi_hat += 2.0 * acc;
            }
        }
    }

    // average off-diagonal sample correlation
    let mut r_bar = 0.0;
    if n > 1 {
        let mut count = 0usize;
        for i in 0..n {
            for j in (i + 1)..n {
                let denom = (s[(i, i)] * s[(j, j)]).sqrt();
                if denom > 0.0 {
                    r_bar += s[(i, j)] / denom;
                }
                count += 1;
            }
        }
        r_bar /= count as f64;
    }

    // rho_hat: diagonal pi terms plus the average-correlation correction
    // built from the theta cross moments
    let mut rho_hat = pi_diag;
    for i in 0..n {
        for j in (i + 1)..n {
            if s[(i, i)] <= 0.0 || s[(j, j)] <= 0.0 {
                continue;
            }
            let mut theta_ii = 0.0;
            let mut theta_jj = 0.0;
            for row in 0..t {
                let cross = x[(row, i)] * x[(row, j)] - s[(i, j)];
                theta_ii += (x[(row, i)] * x[(row, i)] - s[(i, i)]) * cross;
                theta_jj += (x[(row, j)] * x[(row, j)] - s[(j, j)]) * cross;
            }
            theta_ii /= tf;
            theta_jj /= tf;
            let term = (s[(j, j)] / s[(i, i)]).sqrt() * theta_ii
                + (s[(i, i)] / s[(j, j)]).sqrt() * theta_jj;
            // ordered pairs (i,j) and (j,i) contribute identically
            rho_hat += 2.0 * (r_bar / 2.0) * term;
        }
    }

    // gamma_hat: squared Frobenius distance between sample and target
    let mut gamma_hat = 0.0;
    for i in 0..n {
        for j in 0..n {
            let f = if i == j { target_scale } else { 0.0 };
            let d = f - s[(i, j)];
            gamma_hat += d * d;
        }
    }

    let (delta, kappa, degenerate_target) = if gamma_hat > 0.0 {
        let kappa = (pi_hat - rho_hat) / gamma_hat;
        ((kappa / tf).clamp(0.0, 1.0), kappa, false)
    } else {
        (1.0, f64::NAN, true)
    };

    let mut matrix = &s * (1.0 - delta);
    for i in 0..n {
        matrix[(i, i)] += delta * target_scale;
    }
    Ok(CovarianceEstimate {
        matrix,
        estimator: EstimatorKind::LinearShrinkage,
        diagnostics: Diagnostics::LinearShrinkage {
            delta,
            kappa,
            pi_hat,
            rho_hat,
            gamma_hat,
            target_scale,
            degenerate_target,
        },
    })
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
pub(crate) fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_fn(n, |i, _| eig.eigenvalues[order[i]]);
    let mut vectors = DMatrix::zeros(n, n);
    for (new, &old) in order.iter().enumerate() {
        vectors.set_column(new, &eig.eigenvectors.column(old));
    }
    (values, vectors)
}

/// Nonlinear shrinkage of the sample spectrum. Keeps the sample
/// eigenvectors and replaces each eigenvalue through the analytical
/// shrinkage function built from an Epanechnikov kernel density estimate
/// of the spectrum and its Hilbert transform, with per-eigenvalue
/// bandwidth `h * lambda_j`, `h = n^(-1/3)` (Ledoit & Wolf, Ann. Statist.
/// 48(5), 2020). The effective sample size `n = T - 1` accounts for
/// demeaning.
pub fn qis_shrinkage(returns: &DMatrix<f64>) -> Result<CovarianceEstimate, CovarianceError> {
    validate_panel(returns, 2)?;
    let t = returns.nrows();
    let p = returns.ncols();
    let x = center_columns(returns);
    if x.amax() == 0.0 {
        return Err(CovarianceError::AllZeroReturns);
    }
    let n = t - 1;
    if p > n && n < 12 {
        return Err(CovarianceError::KernelSampleTooSmall {
            n_assets: p,
            effective: n,
        });
    }
    let c = p as f64 / n as f64;
    let s = x.transpose() * &x / n as f64;
    let (lambda_all, u) = sorted_symmetric_eigen(&s);

    // the min(p, n) non-null eigenvalues, floored away from zero
    let keep = p.min(n);
    let lam_max = lambda_all[p - 1].max(0.0);
    if lam_max <= 0.0 {
        return Err(CovarianceError::AllZeroReturns);
    }
    let floor = lam_max * 1e-12;
    let lambda: Vec<f64> = (p - keep..p).map(|i| lambda_all[i].max(floor)).collect();

    let h = (n as f64).powf(-1.0 / 3.0);
    let sqrt5 = 5.0f64.sqrt();
    let kernel_scale = 3.0 / (4.0 * sqrt5);

    let mut f_tilde = vec![0.0f64; keep];
    let mut hf_tilde = vec![0.0f64; keep];
    for i in 0..keep {
        let li = lambda[i];
        let mut f_acc = 0.0;
        let mut h_acc = 0.0;
        for &lj in &lambda {
            let bw = h * lj;
            let xij = (li - lj) / bw;
            f_acc += kernel_scale * (1.0 - xij * xij / 5.0).max(0.0) / bw;
            let shape = 1.0 - xij * xij / 5.0;
            let hilbert = if shape.abs() < 1e-14 {
                -3.0 / (10.0 * std::f64::consts::PI) * xij
            } else {
                -3.0 / (10.0 * std::f64::consts::PI) * xij
                    + kernel_scale / std::f64::consts::PI
                        * shape
                        * ((sqrt5 - xij) / (sqrt5 + xij)).abs().ln()
            };
            h_acc += hilbert / bw;
        }
        f_tilde[i] = f_acc / keep as f64;
        hf_tilde[i] = h_acc / keep as f64;
    }

    let pi = std::f64::consts::PI;
    let mut shrunk = vec![0.0f64; p];
    if p <= n {
        for i in 0..keep {
            let li = lambda[i];
            let re = pi * c * li * f_tilde[i];
            let im = 1.0 - c - pi * c * li * hf_tilde[i];
            shrunk[p - keep + i] = li / (re * re + im * im);
        }
    } else {
        // null eigenvalues take the common level implied by the Hilbert
        // transform of the density at zero
        let mean_inv: f64 = lambda.iter().map(|&l| 1.0 / l).sum::<f64>() / keep as f64;
        let hf0 = (1.0 / pi)
            * (3.0 / (10.0 * h * h)
                + kernel_scale / h
                    * (1.0 - 1.0 / (5.0 * h * h))
                    * ((1.0 + sqrt5 * h) / (1.0 - sqrt5 * h)).ln())
            * mean_inv;
        let d0 = 1.0 / (pi * (p - n) as f64 / n as f64 * hf0);
        for v in shrunk.iter_mut().take(p - keep) {
            *v = d0;
        }
        for i in 0..keep {
            let li = lambda[i];
            let amp = f_tilde[i] * f_tilde[i] + hf_tilde[i] * hf_tilde[i];
            shrunk[p - keep + i] = 1.0 / (pi * pi * li * amp);
        }
    }

    let d = DMatrix::from_diagonal(&DVector::from_vec(shrunk.clone()));
    let mut matrix = &u * d * u.transpose();
    // symmetrize against assembly round-off
    for i in 0..p {
        for j in 0..i {
            let v = 0.5 * (matrix[(i, j)] + matrix[(j, i)]);
            matrix[(i, j)] = v;
            matrix[(j, i)] = v;
        }
    }

    Ok(CovarianceEstimate {
        matrix,
        estimator: EstimatorKind::Qis,
        diagnostics: Diagnostics::Qis {
            sample_eigenvalues: lambda_all.as_slice().to_vec(),
            shrunk_eigenvalues: shrunk,
            bandwidth: h,
            concentration: c,
        },
    })
}

/// Floors the spectrum at `floor_ratio * lambda_max`, leaving eigenvectors
/// unchanged. Returns the repaired matrix and how many eigenvalues moved.
pub(crate) fn floor_eigenvalues(
    matrix: &DMatrix<f64>,
    floor_ratio: f64,
) -> Result<(DMatrix<f64>, usize, f64), CovarianceError> {
    let (lambda, u) = sorted_symmetric_eigen(matrix);
    let n = matrix.nrows();
    let lam_max = lambda[n - 1];
    if lam_max <= 0.0 {
        return Err(CovarianceError::NonPositiveSpectrum);
    }
    let floor = floor_ratio * lam_max;
    let mut floored = 0usize;
    let repaired = DVector::from_fn(n, |i, _| {
        if lambda[i] < floor {
            floored += 1;
            floor
        } else {
            lambda[i]
        }
    });
    if floored == 0 {
        return Ok((matrix.clone(), 0, floor));
    }
    let mut out = &u * DMatrix::from_diagonal(&repaired) * u.transpose();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok((out, floored, floor))
}

/// Replaces eigenvalues below `floor_ratio * lambda_max` with that floor,
/// producing a positive-definite matrix.
pub fn repair_singular(
    estimate: &CovarianceEstimate,
    floor_ratio: f64,
) -> Result<CovarianceEstimate, CovarianceError> {
    let (matrix, floored, floor) = floor_eigenvalues(&estimate.matrix, floor_ratio)?;
    Ok(CovarianceEstimate {
        matrix,
        estimator: estimate.estimator,
        diagnostics: Diagnostics::Repaired {
            floored,
            floor,
            source: Box::new(estimate.diagnostics.clone()),
        },
    })
}

/// Per-asset OLS of returns on an intercept and observed factors.
#[derive(Debug, Clone)]
pub struct FactorBetas {
    pub alphas: DVector<f64>,
    /// N x K loadings
    pub betas: DMatrix<f64>,
    /// T x N residuals
    pub residuals: DMatrix<f64>,
}

pub fn estimate_factor_betas(
    returns: &DMatrix<f64>,
    factors: &DMatrix<f64>,
) -> Result<FactorBetas, CovarianceError> {
    let t = returns.nrows();
    let n = returns.ncols();
    let k = factors.ncols();
    if factors.nrows() != t {
        return Err(CovarianceError::DimensionMismatch(format!(
            "factors have {} rows, returns have {t}",
            factors.nrows()
        )));
    }
    if t <= k + 1 {
        return Err(CovarianceError::TooFewObservations {
            required: k + 2,
            got: t,
        });
    }
    validate_panel(returns, 2)?;

    let mut design = DMatrix::zeros(t, k + 1);
    for row in 0..t {
        design[(row, 0)] = 1.0;
        for j in 0..k {
            design[(row, j + 1)] = factors[(row, j)];
        }
    }
    let gram = design.transpose() * &design;
    let chol = nalgebra::Cholesky::new(gram).ok_or(CovarianceError::RankDeficientFactors)?;
    let xty = design.transpose() * returns;
    let coefs = chol.solve(&xty); // (K+1) x N
    let residuals = returns - &design * &coefs;

    let alphas = DVector::from_fn(n, |j, _| coefs[(0, j)]);
    let betas = DMatrix::from_fn(n, k, |j, f| coefs[(f + 1, j)]);
    Ok(FactorBetas {
        alphas,
        betas,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_panel(t: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(t, n, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn sample_cov_hand_panel() {
        // rows: (1,0), (0,1), (-1,-1); column means are 0
        // S = (1/3) [[2, 1], [1, 2]]
        let r = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, -1.0]);
        let est = sample_cov(&r).unwrap();
        assert_abs_diff_eq!(est.matrix[(0, 0)], 2.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(est.matrix[(0, 1)], 1.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(est.matrix[(1, 1)], 2.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn sample_cov_duplicate_columns_rank_deficient() {
        let base = gaussian_panel(20, 1, 1);
        let mut r = DMatrix::zeros(20, 2);
        r.set_column(0, &base.column(0));
        r.set_column(1, &base.column(0));
        let est = sample_cov(&r).unwrap();
        assert_abs_diff_eq!(est.matrix[(0, 0)], est.matrix[(0, 1)], epsilon = 1e-14);
        assert_abs_diff_eq!(est.matrix[(1, 1)], est.matrix[(1, 0)], epsilon = 1e-14);
        let (lambda, _) = sorted_symmetric_eigen(&est.matrix);
        assert!(lambda[0].abs() < 1e-12 * lambda[1]);
    }

    #[test]
    fn sample_cov_needs_two_rows() {
        let r = DMatrix::from_row_slice(1, 2, &[0.1, 0.2]);
        assert!(matches!(
            sample_cov(&r),
            Err(CovarianceError::TooFewObservations { .. })
        ));
    }

    #[test]
    fn sample_cov_rejects_nan() {
        let mut r = gaussian_panel(5, 2, 2);
        r[(3, 1)] = f64::NAN;
        assert!(matches!(
            sample_cov(&r),
            Err(CovarianceError::MissingValue { row: 3, col: 1 })
        ));
    }

    #[test]
    fn shrinkage_intensity_in_unit_interval() {
        for seed in 0..30 {
            let t = 8 + (seed as usize % 20);
            let n = 2 + (seed as usize % 7);
            let r = gaussian_panel(t, n, 100 + seed);
            let est = linear_shrinkage(&r).unwrap();
            match est.diagnostics {
                Diagnostics::LinearShrinkage { delta, .. } => {
                    assert!((0.0..=1.0).contains(&delta), "delta = {delta}");
                }
                _ => panic!("wrong diagnostics"),
            }
        }
    }

    #[test]
    fn shrinkage_is_convex_combination_of_sample_and_target() {
        let r = gaussian_panel(30, 6, 9);
        let est = linear_shrinkage(&r).unwrap();
        let s = sample_cov(&r).unwrap().matrix;
        let (delta, target_scale) = match est.diagnostics {
            Diagnostics::LinearShrinkage {
                delta,
                target_scale,
                ..
            } => (delta, target_scale),
            _ => unreachable!(),
        };
        let mut expected = &s * (1.0 - delta);
        for i in 0..6 {
            expected[(i, i)] += delta * target_scale;
        }
        assert!((est.matrix - expected).amax() < 1e-14);
    }

    #[test]
    fn single_asset_target_equals_sample() {
        let r = gaussian_panel(25, 1, 4);
        let est = linear_shrinkage(&r).unwrap();
        let s = sample_cov(&r).unwrap().matrix;
        assert_abs_diff_eq!(est.matrix[(0, 0)], s[(0, 0)], epsilon = 1e-14);
    }

    #[test]
    fn shrinkage_beats_sample_under_identity_truth() {
        // Monte Carlo oracle: truth is the identity, N = 20, T = 30
        let n = 20;
        let t = 30;
        let trials = 60;
        let mut err_sample = 0.0;
        let mut err_shrunk = 0.0;
        for trial in 0..trials {
            let r = gaussian_panel(t, n, 7000 + trial);
            let s = sample_cov(&r).unwrap().matrix;
            let l = linear_shrinkage(&r).unwrap().matrix;
            let eye = DMatrix::identity(n, n);
            err_sample += (&s - &eye).norm();
            err_shrunk += (&l - &eye).norm();
        }
        assert!(
            err_shrunk < err_sample,
            "shrunk {err_shrunk} vs sample {err_sample}"
        );
    }

    #[test]
    fn clamped_intensities_return_the_endpoints_exactly() {
        // orthogonal, zero-mean columns with equal norms up to a whisker:
        // the sample matrix nearly equals the target, the plug-in
        // intensity clamps at one, and the output is the scaled identity
        let (a, b) = (0.1, 0.10001);
        let upper = DMatrix::from_row_slice(
            4,
            2,
            &[a, b, -a, b, a, -b, -a, -b],
        );
        let est = linear_shrinkage(&upper).unwrap();
        match est.diagnostics {
            Diagnostics::LinearShrinkage {
                delta,
                target_scale,
                ..
            } => {
                assert_eq!(delta, 1.0);
                let target = DMatrix::identity(2, 2) * target_scale;
                assert!((est.matrix - target).amax() < 1e-18);
            }
            _ => unreachable!(),
        }

        // a duplicated column pair makes pi and rho cancel: intensity
        // clamps at zero and the output is the sample matrix
        let base = gaussian_panel(10, 1, 5);
        let mut dup = DMatrix::zeros(10, 2);
        dup.set_column(0, &base.column(0));
        dup.set_column(1, &base.column(0));
        let est = linear_shrinkage(&dup).unwrap();
        match est.diagnostics {
            Diagnostics::LinearShrinkage { delta, .. } => {
                assert_eq!(delta, 0.0);
                let s = sample_cov(&dup).unwrap().matrix;
                assert!((est.matrix - s).amax() < 1e-18);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn shrinkage_conditions_no_worse_than_repair() {
        // whenever shrinkage is active, its output is better conditioned
        // than the floored sample matrix from the same panel
        let cond = |m: &DMatrix<f64>| {
            let (lambda, _) = sorted_symmetric_eigen(m);
            lambda[m.nrows() - 1] / lambda[0]
        };
        for seed in 0..10 {
            let r = gaussian_panel(30, 20, 500 + seed);
            let est = linear_shrinkage(&r).unwrap();
            let delta = match est.diagnostics {
                Diagnostics::LinearShrinkage { delta, .. } => delta,
                _ => unreachable!(),
            };
            if delta <= 0.0 {
                continue;
            }
            let repaired = repair_singular(&sample_cov(&r).unwrap(), 1e-8).unwrap();
            assert!(
                cond(&est.matrix) <= cond(&repaired.matrix),
                "seed {seed}: shrinkage cond {} vs repair cond {}",
                cond(&est.matrix),
                cond(&repaired.matrix)
            );
        }
    }

    #[test]
    fn permuting_assets_permutes_estimates() {
        let r = gaussian_panel(40, 5, 21);
        let mut permuted = DMatrix::zeros(40, 5);
        let perm = [3usize, 0, 4, 1, 2];
        for (new, &old) in perm.iter().enumerate() {
            permuted.set_column(new, &r.column(old));
        }
        for f in [linear_shrinkage, qis_shrinkage] {
            let base = f(&r).unwrap().matrix;
            let shuffled = f(&permuted).unwrap().matrix;
            for i in 0..5 {
                for j in 0..5 {
                    assert_abs_diff_eq!(
                        shuffled[(i, j)],
                        base[(perm[i], perm[j])],
                        epsilon = 1e-10
                    );
                }
            }
        }
    }

    #[test]
    fn qis_keeps_sample_eigenbasis() {
        let r = gaussian_panel(60, 8, 33);
        let est = qis_shrinkage(&r).unwrap();
        let s = sample_cov(&r).unwrap().matrix;
        let commutator = (&est.matrix * &s - &s * &est.matrix).norm();
        assert!(commutator <= 1e-6 * s.norm() * est.matrix.norm());
    }

    #[test]
    fn qis_spectrum_nonnegative_in_singular_regime() {
        let r = gaussian_panel(25, 40, 55);
        let est = qis_shrinkage(&r).unwrap();
        let (lambda, _) = sorted_symmetric_eigen(&est.matrix);
        assert!(lambda[0] > -1e-10 * lambda[39].max(1.0));
    }

    #[test]
    fn qis_vanishing_concentration_recovers_sample_eigenvalues() {
        let r = gaussian_panel(4000, 4, 77);
        let est = qis_shrinkage(&r).unwrap();
        match est.diagnostics {
            Diagnostics::Qis {
                sample_eigenvalues,
                shrunk_eigenvalues,
                ..
            } => {
                for (s, d) in sample_eigenvalues.iter().zip(&shrunk_eigenvalues) {
                    assert!((s - d).abs() < 0.05, "sample {s} vs shrunk {d}");
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn qis_rejects_tiny_singular_panels() {
        let r = gaussian_panel(6, 10, 3);
        assert!(matches!(
            qis_shrinkage(&r),
            Err(CovarianceError::KernelSampleTooSmall { .. })
        ));
    }

    #[test]
    fn repair_leaves_full_rank_input_unchanged() {
        let r = gaussian_panel(50, 4, 13);
        let est = sample_cov(&r).unwrap();
        let repaired = repair_singular(&est, 1e-8).unwrap();
        assert!((repaired.matrix - &est.matrix).amax() < 1e-12);
    }

    #[test]
    fn repair_raises_rank_one_matrix_to_floor() {
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let rank_one = &v * v.transpose();
        let est = CovarianceEstimate {
            matrix: rank_one,
            estimator: EstimatorKind::Sample,
            diagnostics: Diagnostics::None,
        };
        let repaired = repair_singular(&est, 1e-8).unwrap();
        let (lambda, _) = sorted_symmetric_eigen(&repaired.matrix);
        let lam_max = lambda[2];
        assert_abs_diff_eq!(lambda[0], 1e-8 * lam_max, epsilon = 1e-12 * lam_max);
        assert_abs_diff_eq!(lambda[1], 1e-8 * lam_max, epsilon = 1e-12 * lam_max);
        match repaired.diagnostics {
            Diagnostics::Repaired { floored, .. } => assert_eq!(floored, 2),
            _ => panic!("wrong diagnostics"),
        }
    }

    #[test]
    fn repair_rejects_zero_matrix() {
        let est = CovarianceEstimate {
            matrix: DMatrix::zeros(3, 3),
            estimator: EstimatorKind::Sample,
            diagnostics: Diagnostics::None,
        };
        assert!(matches!(
            repair_singular(&est, 1e-8),
            Err(CovarianceError::NonPositiveSpectrum)
        ));
    }

    #[test]
    fn factor_betas_recover_noiseless_loadings() {
        let t = 50;
        let n = 6;
        let k = 2;
        let f = gaussian_panel(t, k, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let alphas = DVector::from_fn(n, |_, _| rng.random::<f64>() * 0.01);
        let betas = DMatrix::from_fn(n, k, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let mut returns = DMatrix::zeros(t, n);
        for row in 0..t {
            for j in 0..n {
                let mut v = alphas[j];
                for q in 0..k {
                    v += betas[(j, q)] * f[(row, q)];
                }
                returns[(row, j)] = v;
            }
        }
        let fit = estimate_factor_betas(&returns, &f).unwrap();
        assert!((fit.alphas - alphas).amax() < 1e-10);
        assert!((fit.betas - betas).amax() < 1e-10);
        assert!(fit.residuals.amax() < 1e-10);
    }

    #[test]
    fn factor_betas_hand_simple_regression() {
        // four points, single factor: slope 2, intercept 1
        let f = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let r = DMatrix::from_row_slice(4, 1, &[1.0, 3.0, 5.0, 7.0]);
        let fit = estimate_factor_betas(&r, &f).unwrap();
        assert_abs_diff_eq!(fit.alphas[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.betas[(0, 0)], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn residuals_orthogonal_to_regressors() {
        let f = gaussian_panel(80, 3, 50);
        let r = gaussian_panel(80, 5, 51);
        let fit = estimate_factor_betas(&r, &f).unwrap();
        let ones = DVector::from_element(80, 1.0);
        for j in 0..5 {
            let resid = fit.residuals.column(j);
            assert!(resid.dot(&ones).abs() < 1e-8);
            for q in 0..3 {
                let fq = DVector::from_fn(80, |row, _| f[(row, q)]);
                assert!(resid.dot(&fq).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn constant_factor_column_is_rank_deficient() {
        let mut f = gaussian_panel(30, 2, 60);
        for row in 0..30 {
            f[(row, 1)] = 0.0;
        }
        let r = gaussian_panel(30, 3, 61);
        assert!(matches!(
            estimate_factor_betas(&r, &f),
            Err(CovarianceError::RankDeficientFactors)
        ));
    }
}
