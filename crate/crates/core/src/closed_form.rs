//! Analytic portfolio solutions for equality-constrained problems.
//!
//! These serve both as fast paths (no iterative solve) and as independent
//! oracles for the QP layer. All linear solves go through a symmetric
//! positive-definite Cholesky factorization; covariance matrices are never
//! inverted explicitly.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ClosedFormError {
    #[error("covariance matrix is singular or not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate frontier: mean vector is collinear with ones (D = {d:.3e})")]
    DegenerateFrontier { d: f64 },
    #[error("mean vector equals the risk-free rate on every asset; no excess return")]
    NoExcessReturn,
    #[error("market portfolio undefined: 1' inv(Sigma) (mu - rf 1) = {value:.3e}")]
    MarketPortfolioUndefined { value: f64 },
}

/// The scalar frontier constants built from mu and Sigma:
/// `a = mu' inv(Sigma) 1`, `b = mu' inv(Sigma) mu`, `c = 1' inv(Sigma) 1`,
/// `d = b c - a^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontierScalars {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

/// Relative threshold below which `d` is treated as zero.
const DEGENERACY_TOL: f64 = 1e-12;

fn cholesky(sigma: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, ClosedFormError> {
    if sigma.nrows() != sigma.ncols() {
        return Err(ClosedFormError::DimensionMismatch(format!(
            "covariance is {}x{}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    Cholesky::new(sigma.clone()).ok_or(ClosedFormError::NotPositiveDefinite)
}

fn check_mu_dim(mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<(), ClosedFormError> {
    if mu.len() != sigma.nrows() {
        return Err(ClosedFormError::DimensionMismatch(format!(
            "mu has {} entries for a {}-asset covariance",
            mu.len(),
            sigma.nrows()
        )));
    }
    Ok(())
}

impl FrontierScalars {
    pub fn compute(mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<Self, ClosedFormError> {
        check_mu_dim(mu, sigma)?;
        let chol = cholesky(sigma)?;
        let ones = DVector::from_element(sigma.nrows(), 1.0);
        let sinv_ones = chol.solve(&ones);
        let sinv_mu = chol.solve(mu);
        let a = mu.dot(&sinv_ones);
        let b = mu.dot(&sinv_mu);
        let c = ones.dot(&sinv_ones);
        Ok(FrontierScalars {
            a,
            b,
            c,
            d: b * c - a * a,
        })
    }

    /// Mean return of the global minimum-variance portfolio, `a / c`.
    pub fn min_variance_mean(&self) -> f64 {
        self.a / self.c
    }
}

/// Fully invested minimum-variance weights, `inv(Sigma) 1 / c`.
pub fn min_variance_closed(sigma: &DMatrix<f64>) -> Result<DVector<f64>, ClosedFormError> {
    let chol = cholesky(sigma)?;
    let ones = DVector::from_element(sigma.nrows(), 1.0);
    let sinv_ones = chol.solve(&ones);
    let c = ones.dot(&sinv_ones);
    if !c.is_finite() || c <= 0.0 {
        return Err(ClosedFormError::NotPositiveDefinite);
    }
    Ok(sinv_ones / c)
}

/// Fully invested mean-variance weights hitting the target mean exactly.
pub fn mean_variance_closed(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    target_mean: f64,
) -> Result<DVector<f64>, ClosedFormError> {
    check_mu_dim(mu, sigma)?;
    let chol = cholesky(sigma)?;
    let ones = DVector::from_element(sigma.nrows(), 1.0);
    let sinv_ones = chol.solve(&ones);
    let sinv_mu = chol.solve(mu);
    let a = mu.dot(&sinv_ones);
    let b = mu.dot(&sinv_mu);
    let c = ones.dot(&sinv_ones);
    let d = b * c - a * a;
    if d <= DEGENERACY_TOL * b * c {
        return Err(ClosedFormError::DegenerateFrontier { d });
    }
    let w = (&sinv_ones * b - &sinv_mu * a + (&sinv_mu * c - &sinv_ones * a) * target_mean) / d;
    Ok(w)
}

/// Portfolio mixing the risky tangency fund with the risk-free asset.
#[derive(Debug, Clone)]
pub struct TangencyPortfolio {
    /// Risky-asset weights `w*`; they need not sum to one.
    pub weights: DVector<f64>,
    /// Fraction `1 - w*' 1` held at the risk-free rate.
    pub riskfree_fraction: f64,
    /// The fully invested market (tangency) portfolio.
    pub market: DVector<f64>,
}

/// One-fund construction: `w* = gamma* inv(Sigma)(mu - rf 1)` scaled to hit
/// the target mean, and the market portfolio it is proportional to.
pub fn tangency_with_riskfree(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    riskfree_rate: f64,
    target_mean: f64,
) -> Result<TangencyPortfolio, ClosedFormError> {
    check_mu_dim(mu, sigma)?;
    let chol = cholesky(sigma)?;
    let n = mu.len();
    let excess = mu - DVector::from_element(n, riskfree_rate);
    let scale = mu.amax().max(riskfree_rate.abs()).max(1.0);
    if excess.amax() <= 1e-14 * scale {
        return Err(ClosedFormError::NoExcessReturn);
    }
    let sinv_excess = chol.solve(&excess);
    let denom = excess.dot(&sinv_excess);
    let gamma = (target_mean - riskfree_rate) / denom;
    let weights = &sinv_excess * gamma;

    let ones_dot = sinv_excess.sum();
    if ones_dot.abs() <= 1e-12 * sinv_excess.amax().max(1.0) {
        return Err(ClosedFormError::MarketPortfolioUndefined { value: ones_dot });
    }
    let market = &sinv_excess / ones_dot;
    let riskfree_fraction = 1.0 - weights.sum();
    Ok(TangencyPortfolio {
        weights,
        riskfree_fraction,
        market,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_pd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let g = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        &g * g.transpose() + DMatrix::identity(n, n) * 0.25
    }

    #[test]
    fn identity_gives_equal_weights() {
        let sigma = DMatrix::identity(5, 5);
        let w = min_variance_closed(&sigma).unwrap();
        for i in 0..5 {
            assert_abs_diff_eq!(w[i], 0.2, epsilon = 1e-14);
        }
    }

    #[test]
    fn diagonal_two_asset_case() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]);
        let w = min_variance_closed(&sigma).unwrap();
        assert_abs_diff_eq!(w[0], 0.8, epsilon = 1e-14);
        assert_abs_diff_eq!(w[1], 0.2, epsilon = 1e-14);
    }

    #[test]
    fn duplicated_asset_is_singular() {
        let sigma = DMatrix::from_element(2, 2, 1.0);
        assert_eq!(
            min_variance_closed(&sigma),
            Err(ClosedFormError::NotPositiveDefinite)
        );
    }

    #[test]
    fn mean_variance_hand_case() {
        let sigma = DMatrix::identity(2, 2);
        let mu = DVector::from_vec(vec![0.1, 0.2]);
        let w = mean_variance_closed(&mu, &sigma, 0.15).unwrap();
        assert_abs_diff_eq!(w[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn target_at_vertex_equals_min_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sigma = random_pd(6, &mut rng);
        let mu = DVector::from_fn(6, |i, _| 0.05 + 0.01 * i as f64);
        let scalars = FrontierScalars::compute(&mu, &sigma).unwrap();
        let w_mv = mean_variance_closed(&mu, &sigma, scalars.min_variance_mean()).unwrap();
        let w_gmv = min_variance_closed(&sigma).unwrap();
        assert!((w_mv - w_gmv).amax() < 1e-10);
    }

    #[test]
    fn collinear_mean_is_degenerate() {
        let sigma = DMatrix::identity(3, 3);
        let mu = DVector::from_element(3, 0.07);
        assert!(matches!(
            mean_variance_closed(&mu, &sigma, 0.07),
            Err(ClosedFormError::DegenerateFrontier { .. })
        ));
    }

    #[test]
    fn budget_and_target_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = 4 + (rng.random::<u32>() % 10) as usize;
            let sigma = random_pd(n, &mut rng);
            let mu = DVector::from_fn(n, |_, _| rng.random::<f64>() * 0.2);
            let target = 0.11;
            match mean_variance_closed(&mu, &sigma, target) {
                Ok(w) => {
                    assert_abs_diff_eq!(w.sum(), 1.0, epsilon = 1e-10);
                    assert_abs_diff_eq!(w.dot(&mu), target, epsilon = 1e-10);
                }
                Err(ClosedFormError::DegenerateFrontier { .. }) => {}
                Err(e) => panic!("unexpected error {e}"),
            }
        }
    }

    #[test]
    fn frontier_variance_is_convex_with_vertex_at_min_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sigma = random_pd(8, &mut rng);
        let mu = DVector::from_fn(8, |i, _| 0.02 + 0.013 * (i as f64));
        let scalars = FrontierScalars::compute(&mu, &sigma).unwrap();
        let vertex = scalars.min_variance_mean();
        let var_at = |t: f64| {
            let w = mean_variance_closed(&mu, &sigma, t).unwrap();
            (w.transpose() * &sigma * w)[(0, 0)]
        };
        let targets: Vec<f64> = (0..5).map(|k| vertex - 0.02 + 0.01 * k as f64).collect();
        let vars: Vec<f64> = targets.iter().map(|&t| var_at(t)).collect();
        // quadratic in the target: second differences constant and positive
        let d2a = vars[2] - 2.0 * vars[1] + vars[0];
        let d2b = vars[3] - 2.0 * vars[2] + vars[1];
        let d2c = vars[4] - 2.0 * vars[3] + vars[2];
        assert!(d2a > 0.0);
        assert_abs_diff_eq!(d2a, d2b, epsilon = 1e-9 * d2a.abs());
        assert_abs_diff_eq!(d2b, d2c, epsilon = 1e-9 * d2b.abs());
        let v_vertex = var_at(vertex);
        for v in vars {
            assert!(v + 1e-14 >= v_vertex);
        }
    }

    #[test]
    fn tangency_hand_case_and_one_fund_line() {
        let sigma = DMatrix::identity(2, 2);
        let mu = DVector::from_vec(vec![0.1, 0.2]);
        let t = tangency_with_riskfree(&mu, &sigma, 0.0, 0.15).unwrap();
        assert_abs_diff_eq!(t.market[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.market[1], 2.0 / 3.0, epsilon = 1e-12);

        // points for varying targets lie on the line through (0, rf) and
        // (sigma(market), mean(market))
        let rf = 0.02;
        let market = tangency_with_riskfree(&mu, &sigma, rf, 0.10)
            .unwrap()
            .market;
        let m_mean = market.dot(&mu);
        let m_std = (market.transpose() * &sigma * &market)[(0, 0)].sqrt();
        let slope = (m_mean - rf) / m_std;
        for target in [0.03, 0.08, 0.12, 0.2] {
            let t = tangency_with_riskfree(&mu, &sigma, rf, target).unwrap();
            let mean = t.weights.dot(&mu) + t.riskfree_fraction * rf;
            assert_abs_diff_eq!(mean, target, epsilon = 1e-10);
            let std = (t.weights.transpose() * &sigma * &t.weights)[(0, 0)].sqrt();
            assert_abs_diff_eq!(mean, rf + slope * std, epsilon = 1e-10);
        }
    }

    #[test]
    fn zero_excess_target_sits_in_cash() {
        let sigma = DMatrix::identity(2, 2);
        let mu = DVector::from_vec(vec![0.1, 0.2]);
        let rf = 0.03;
        let t = tangency_with_riskfree(&mu, &sigma, rf, rf).unwrap();
        assert!(t.weights.amax() < 1e-14);
        assert_abs_diff_eq!(t.riskfree_fraction, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn flat_excess_returns_error() {
        let sigma = DMatrix::identity(2, 2);
        let mu = DVector::from_element(2, 0.05);
        assert!(matches!(
            tangency_with_riskfree(&mu, &sigma, 0.05, 0.1),
            Err(ClosedFormError::NoExcessReturn)
        ));
    }
}
