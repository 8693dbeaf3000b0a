//! Declarative portfolio problems and their reduction to standard-form
//! QPs.
//!
//! A [`PortfolioSpec`] combines an objective (minimum variance, mean
//! variance with a target, maximum Sharpe ratio), a constraint set on top
//! of the always-on budget `w'1 = 1`, and l1/l2 regularization strengths.
//! [`build_qp`] maps any combination onto one QP:
//!
//! * l2 regularization shifts every covariance eigenvalue up by
//!   `lambda_2` (spectral decomposition, with a floor repairing singular
//!   estimates),
//! * the l1 penalty and the long-short book run through the `w = w+ - w-`
//!   split with nonnegative parts, tripling the variable count,
//! * maximum Sharpe problems are homogenized: in variables
//!   `(w_tilde, gamma) = (gamma w, 1 / w'(mu - rf 1))` the fractional
//!   objective becomes quadratic, the normalization row
//!   `w_tilde'(mu - rf 1) = 1` and budget row `1'w_tilde = gamma` are
//!   appended, and every other constraint and both penalties are rescaled
//!   by gamma so the problem stays equivalent,
//! * absolute-value constraints (total turnover, benchmark distance) get
//!   their own split pairs.
//!
//! [`recover_weights`] undoes the lifting (`w = w+ - w-`, division by
//! `gamma`). Auxiliary constructions (frontier tracing, random simplex
//! portfolios, equal risk contribution, tracking-error solves) live in
//! [`construct`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

mod build;
pub mod construct;

pub use build::{build_qp, solve_portfolio};
pub use construct::{
    efficient_frontier, equal_risk_contribution, random_dirichlet_portfolios,
    solve_with_tracking_error, FrontierPoint,
};

use crate::qp::{QpError, QpProblem, QpSolution, QpStatus};

#[derive(Error, Debug)]
pub enum PortfolioError {
    #[error("invalid specification: {0}")]
    Validation(String),
    #[error("objective requires a mean vector")]
    MeanRequired,
    #[error("tracking-error constraints are handled by solve_with_tracking_error only")]
    TrackingErrorNotHere,
    #[error("solve_with_tracking_error needs a tracking_error constraint block")]
    TrackingErrorMissing,
    #[error("tracking-error constraints are not supported with a max-Sharpe objective")]
    TrackingErrorWithMaxSharpe,
    #[error(
        "no feasible portfolio earns an excess return above the risk-free rate (best found: {best:.3e})"
    )]
    NoPositiveExcessReturn { best: f64 },
    #[error("scale recovery failed: gamma* = {gamma:.3e}")]
    DegenerateScale { gamma: f64 },
    #[error("solver did not return a solution: {0:?}")]
    NotSolved(QpStatus),
    #[error("tracking-error limit infeasible: residual tracking variance {achieved:.3e} exceeds {limit:.3e}")]
    TrackingErrorInfeasible { achieved: f64, limit: f64 },
    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("risk-parity iteration did not converge within {0} sweeps")]
    ErcNoConvergence(usize),
    #[error("target grid is empty")]
    EmptyGrid,
    #[error("frontier tracing requires a mean-variance compatible objective")]
    FrontierObjective,
    #[error("draw counts must be positive")]
    EmptyDraws,
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("covariance estimation: {0}")]
    Covariance(#[from] crate::covariance::CovarianceError),
}

/// What the portfolio optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    MinVariance,
    MeanVariance { target_mean: f64 },
    MaxSharpe { riskfree_rate: f64 },
}

/// Penalty strengths: `l1 * ||w||_1 + l2 * ||w||_2^2` added to the
/// variance objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Regularization {
    pub l1: f64,
    pub l2: f64,
}

impl Regularization {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(l1: f64, l2: f64) -> Self {
        Self { l1, l2 }
    }
}

/// Per-asset holding bounds `L <= w <= U` (infinities allowed).
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

/// `|w_i - previous_i| <= limit_i` per asset.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnoverIndividual {
    pub previous: DVector<f64>,
    pub limits: DVector<f64>,
}

/// `sum_i |w_i - previous_i| <= limit`.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnoverTotal {
    pub previous: DVector<f64>,
    pub limit: f64,
}

/// `sum_i |w_i - benchmark_i| <= limit`.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkDistance {
    pub benchmark: DVector<f64>,
    pub limit: f64,
}

/// Exposure control on estimated factor loadings.
#[derive(Debug, Clone, PartialEq)]
pub enum FactorRule {
    /// `loadings_k' w = 0` for every factor k.
    Neutralize,
    /// `|loadings_k' w| <= bounds_k`.
    Bound(DVector<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorExposure {
    /// N x K loadings.
    pub loadings: DMatrix<f64>,
    pub rule: FactorRule,
}

/// Extra one-sided linear rows `A w <= upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRows {
    pub matrix: DMatrix<f64>,
    pub upper: DVector<f64>,
}

/// `(w - benchmark)' Sigma (w - benchmark) <= variance_limit`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingError {
    pub benchmark: DVector<f64>,
    pub variance_limit: f64,
}

/// The feasible set on top of the always-on budget constraint `w'1 = 1`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConstraintSet {
    pub box_bounds: Option<BoxBounds>,
    /// Gross-exposure book: long mass at most `1 + theta`, short mass at
    /// most `theta`.
    pub long_short: Option<f64>,
    pub turnover_individual: Option<TurnoverIndividual>,
    pub turnover_total: Option<TurnoverTotal>,
    pub benchmark_distance: Option<BenchmarkDistance>,
    pub factor_exposure: Option<FactorExposure>,
    pub linear: Option<LinearRows>,
    pub tracking_error: Option<TrackingError>,
}

impl ConstraintSet {
    /// Budget constraint only.
    pub fn budget_only() -> Self {
        Self::default()
    }

    /// Budget plus `w >= 0`.
    pub fn long_only(n: usize) -> Self {
        Self {
            box_bounds: Some(BoxBounds {
                lower: DVector::zeros(n),
                upper: DVector::from_element(n, f64::INFINITY),
            }),
            ..Self::default()
        }
    }

    fn validate(&self, n: usize) -> Result<(), PortfolioError> {
        let check_len = |len: usize, what: &str| {
            if len != n {
                Err(PortfolioError::Validation(format!(
                    "{what} has {len} entries for {n} assets"
                )))
            } else {
                Ok(())
            }
        };
        if let Some(b) = &self.box_bounds {
            check_len(b.lower.len(), "box lower bound")?;
            check_len(b.upper.len(), "box upper bound")?;
            for i in 0..n {
                if b.lower[i] > b.upper[i] {
                    return Err(PortfolioError::Validation(format!(
                        "box bounds inverted at asset {i}: {} > {}",
                        b.lower[i], b.upper[i]
                    )));
                }
            }
        }
        if let Some(theta) = self.long_short {
            if !(theta >= 0.0) {
                return Err(PortfolioError::Validation(format!(
                    "long-short budget must be nonnegative, got {theta}"
                )));
            }
        }
        if let Some(t) = &self.turnover_individual {
            check_len(t.previous.len(), "turnover previous weights")?;
            check_len(t.limits.len(), "turnover limits")?;
            if t.limits.iter().any(|&v| v < 0.0) {
                return Err(PortfolioError::Validation(
                    "turnover limits must be nonnegative".into(),
                ));
            }
        }
        if let Some(t) = &self.turnover_total {
            check_len(t.previous.len(), "turnover previous weights")?;
            if !(t.limit >= 0.0) {
                return Err(PortfolioError::Validation(format!(
                    "total turnover limit must be nonnegative, got {}",
                    t.limit
                )));
            }
        }
        if let Some(b) = &self.benchmark_distance {
            check_len(b.benchmark.len(), "benchmark weights")?;
            if !(b.limit >= 0.0) {
                return Err(PortfolioError::Validation(format!(
                    "benchmark distance limit must be nonnegative, got {}",
                    b.limit
                )));
            }
        }
        if let Some(f) = &self.factor_exposure {
            check_len(f.loadings.nrows(), "factor loadings")?;
            if let FactorRule::Bound(bounds) = &f.rule {
                if bounds.len() != f.loadings.ncols() {
                    return Err(PortfolioError::Validation(format!(
                        "{} factor bounds for {} factors",
                        bounds.len(),
                        f.loadings.ncols()
                    )));
                }
            }
        }
        if let Some(rows) = &self.linear {
            check_len(rows.matrix.ncols(), "linear constraint matrix columns")?;
            if rows.matrix.nrows() != rows.upper.len() {
                return Err(PortfolioError::Validation(format!(
                    "{} linear rows with {} upper bounds",
                    rows.matrix.nrows(),
                    rows.upper.len()
                )));
            }
        }
        if let Some(te) = &self.tracking_error {
            check_len(te.benchmark.len(), "tracking-error benchmark")?;
            if !(te.variance_limit > 0.0) {
                return Err(PortfolioError::Validation(format!(
                    "tracking-error variance limit must be positive, got {}",
                    te.variance_limit
                )));
            }
        }
        Ok(())
    }
}

/// A complete problem statement: objective, constraints, penalties and
/// the moment inputs.
#[derive(Debug, Clone)]
pub struct PortfolioSpec {
    pub objective: Objective,
    pub constraints: ConstraintSet,
    pub regularization: Regularization,
    pub mean: Option<DVector<f64>>,
    pub covariance: DMatrix<f64>,
}

impl PortfolioSpec {
    pub fn n_assets(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn validate(&self) -> Result<(), PortfolioError> {
        let n = self.covariance.nrows();
        if self.covariance.ncols() != n || n == 0 {
            return Err(PortfolioError::Validation(format!(
                "covariance is {}x{}",
                n,
                self.covariance.ncols()
            )));
        }
        if let Some(mu) = &self.mean {
            if mu.len() != n {
                return Err(PortfolioError::Validation(format!(
                    "mean has {} entries for {n} assets",
                    mu.len()
                )));
            }
        }
        match self.objective {
            Objective::MeanVariance { target_mean } => {
                if self.mean.is_none() {
                    return Err(PortfolioError::MeanRequired);
                }
                if !target_mean.is_finite() {
                    return Err(PortfolioError::Validation(format!(
                        "target mean must be finite, got {target_mean}"
                    )));
                }
            }
            Objective::MaxSharpe { riskfree_rate } => {
                if self.mean.is_none() {
                    return Err(PortfolioError::MeanRequired);
                }
                if !riskfree_rate.is_finite() {
                    return Err(PortfolioError::Validation(format!(
                        "risk-free rate must be finite, got {riskfree_rate}"
                    )));
                }
            }
            Objective::MinVariance => {}
        }
        if !(self.regularization.l1 >= 0.0 && self.regularization.l2 >= 0.0) {
            return Err(PortfolioError::Validation(format!(
                "penalty strengths must be nonnegative, got l1 = {}, l2 = {}",
                self.regularization.l1, self.regularization.l2
            )));
        }
        self.constraints.validate(n)
    }
}

/// Purpose of an auxiliary split-variable block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxPurpose {
    TurnoverTotal,
    BenchmarkDistance,
}

/// Where each role lives inside the QP variable vector:
/// `[w, (w+, w-), (gamma), aux pairs...]`.
#[derive(Debug, Clone)]
pub struct VariableLayout {
    pub n_assets: usize,
    /// w+/w- blocks present (l1 penalty or long-short book)
    pub split: bool,
    /// gamma present (max-Sharpe homogenization)
    pub homogenized: bool,
    /// offsets of auxiliary (delta+, delta-) pairs
    pub aux: Vec<(AuxPurpose, usize)>,
    pub total_vars: usize,
}

impl VariableLayout {
    pub(crate) fn new(n: usize, split: bool, homogenized: bool, aux_blocks: &[AuxPurpose]) -> Self {
        let mut total = n * if split { 3 } else { 1 };
        let gamma_at = total;
        if homogenized {
            total += 1;
        }
        let mut aux = Vec::new();
        for &purpose in aux_blocks {
            aux.push((purpose, total));
            total += 2 * n;
        }
        let _ = gamma_at;
        Self {
            n_assets: n,
            split,
            homogenized,
            aux,
            total_vars: total,
        }
    }

    /// Index of the scale variable gamma.
    pub fn gamma_index(&self) -> Option<usize> {
        self.homogenized
            .then(|| self.n_assets * if self.split { 3 } else { 1 })
    }

    pub fn positive_part_offset(&self) -> Option<usize> {
        self.split.then_some(self.n_assets)
    }

    pub fn negative_part_offset(&self) -> Option<usize> {
        self.split.then_some(2 * self.n_assets)
    }
}

/// A built QP together with the variable map needed to interpret it.
#[derive(Debug, Clone)]
pub struct ReformulatedQp {
    pub qp: QpProblem,
    pub layout: VariableLayout,
}

/// Extracts portfolio weights from a solved QP: recombines split parts and
/// divides by gamma for homogenized layouts.
pub fn recover_weights(
    reform: &ReformulatedQp,
    solution: &QpSolution,
) -> Result<DVector<f64>, PortfolioError> {
    if solution.status != QpStatus::Solved {
        return Err(PortfolioError::NotSolved(solution.status));
    }
    recover_weights_from(reform, &solution.x)
}

/// Recovery from a raw primal vector, without a status check. Useful for
/// inspecting iteration-capped runs; callers own the quality judgment.
pub fn recover_weights_from(
    reform: &ReformulatedQp,
    x: &DVector<f64>,
) -> Result<DVector<f64>, PortfolioError> {
    let layout = &reform.layout;
    let n = layout.n_assets;
    let mut w = if layout.split {
        let plus = layout.positive_part_offset().expect("split layout");
        let minus = layout.negative_part_offset().expect("split layout");
        DVector::from_fn(n, |i, _| x[plus + i] - x[minus + i])
    } else {
        DVector::from_fn(n, |i, _| x[i])
    };
    if let Some(gidx) = layout.gamma_index() {
        let gamma = x[gidx];
        if gamma <= 1e-12 {
            return Err(PortfolioError::DegenerateScale { gamma });
        }
        w /= gamma;
    }
    Ok(w)
}

/// A scalar broadcast to every asset, or an explicit per-asset vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrVec {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl ScalarOrVec {
    fn to_vector(&self, n: usize, what: &str) -> Result<DVector<f64>, PortfolioError> {
        match self {
            ScalarOrVec::Scalar(v) => Ok(DVector::from_element(n, *v)),
            ScalarOrVec::Vector(values) => {
                if values.len() != n {
                    return Err(PortfolioError::Validation(format!(
                        "{what} has {} entries for {n} assets",
                        values.len()
                    )));
                }
                Ok(DVector::from_vec(values.clone()))
            }
        }
    }
}

/// Benchmark weights in configuration: the equal-weight portfolio or an
/// explicit vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BenchmarkWeights {
    Named(String),
    Explicit(Vec<f64>),
}

impl BenchmarkWeights {
    fn to_vector(&self, n: usize) -> Result<DVector<f64>, PortfolioError> {
        match self {
            BenchmarkWeights::Named(name) if name == "equal" => {
                Ok(DVector::from_element(n, 1.0 / n as f64))
            }
            BenchmarkWeights::Named(other) => Err(PortfolioError::Validation(format!(
                "unknown benchmark {other:?}; use \"equal\" or an explicit weight vector"
            ))),
            BenchmarkWeights::Explicit(values) => {
                ScalarOrVec::Vector(values.clone()).to_vector(n, "benchmark weights")
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnoverIndividualConfig {
    pub limits: ScalarOrVec,
    #[serde(default)]
    pub previous: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnoverTotalConfig {
    pub limit: f64,
    #[serde(default)]
    pub previous: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkDistanceConfig {
    pub limit: f64,
    pub weights: BenchmarkWeights,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorExposureConfig {
    /// N rows of K loadings.
    pub loadings: Vec<Vec<f64>>,
    /// Per-factor exposure bounds; absent means full neutralization.
    #[serde(default)]
    pub bounds: Option<ScalarOrVec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearRowsConfig {
    pub matrix: Vec<Vec<f64>>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackingErrorConfig {
    pub variance_limit: f64,
    pub weights: BenchmarkWeights,
}

/// Wire form of the constraint set. Box bounds broadcast scalars; blocks
/// that need the previous book (turnover) take it from the configuration
/// or from the caller at instantiation, and are skipped when neither is
/// available (a fresh book has nothing to turn over).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ConstraintConfig {
    #[serde(default)]
    pub box_lower: Option<ScalarOrVec>,
    #[serde(default)]
    pub box_upper: Option<ScalarOrVec>,
    #[serde(default)]
    pub long_short: Option<f64>,
    #[serde(default)]
    pub turnover_individual: Option<TurnoverIndividualConfig>,
    #[serde(default)]
    pub turnover_total: Option<TurnoverTotalConfig>,
    #[serde(default)]
    pub benchmark_l1: Option<BenchmarkDistanceConfig>,
    #[serde(default)]
    pub factor_exposure: Option<FactorExposureConfig>,
    #[serde(default)]
    pub linear: Option<LinearRowsConfig>,
    #[serde(default)]
    pub tracking_error: Option<TrackingErrorConfig>,
}

impl ConstraintConfig {
    pub fn long_only() -> Self {
        Self {
            box_lower: Some(ScalarOrVec::Scalar(0.0)),
            ..Self::default()
        }
    }

    /// Builds the runtime constraint set for `n` assets. `previous`
    /// overrides the configured previous book for turnover blocks.
    pub fn instantiate(
        &self,
        n: usize,
        previous: Option<&DVector<f64>>,
    ) -> Result<ConstraintSet, PortfolioError> {
        let mut set = ConstraintSet::default();
        if self.box_lower.is_some() || self.box_upper.is_some() {
            let lower = match &self.box_lower {
                Some(v) => v.to_vector(n, "box lower bound")?,
                None => DVector::from_element(n, f64::NEG_INFINITY),
            };
            let upper = match &self.box_upper {
                Some(v) => v.to_vector(n, "box upper bound")?,
                None => DVector::from_element(n, f64::INFINITY),
            };
            set.box_bounds = Some(BoxBounds { lower, upper });
        }
        set.long_short = self.long_short;
        let resolve_previous = |explicit: &Option<Vec<f64>>| -> Result<Option<DVector<f64>>, PortfolioError> {
            if let Some(prev) = previous {
                if prev.len() != n {
                    return Err(PortfolioError::Validation(format!(
                        "previous book has {} entries for {n} assets",
                        prev.len()
                    )));
                }
                Ok(Some(prev.clone()))
            } else if let Some(values) = explicit {
                Ok(Some(ScalarOrVec::Vector(values.clone()).to_vector(n, "previous book")?))
            } else {
                Ok(None)
            }
        };
        if let Some(cfg) = &self.turnover_individual {
            if let Some(prev) = resolve_previous(&cfg.previous)? {
                set.turnover_individual = Some(TurnoverIndividual {
                    previous: prev,
                    limits: cfg.limits.to_vector(n, "turnover limits")?,
                });
            }
        }
        if let Some(cfg) = &self.turnover_total {
            if let Some(prev) = resolve_previous(&cfg.previous)? {
                set.turnover_total = Some(TurnoverTotal {
                    previous: prev,
                    limit: cfg.limit,
                });
            }
        }
        if let Some(cfg) = &self.benchmark_l1 {
            set.benchmark_distance = Some(BenchmarkDistance {
                benchmark: cfg.weights.to_vector(n)?,
                limit: cfg.limit,
            });
        }
        if let Some(cfg) = &self.factor_exposure {
            if cfg.loadings.len() != n {
                return Err(PortfolioError::Validation(format!(
                    "factor loadings cover {} assets, expected {n}",
                    cfg.loadings.len()
                )));
            }
            let k = cfg.loadings.first().map(|r| r.len()).unwrap_or(0);
            if k == 0 || cfg.loadings.iter().any(|r| r.len() != k) {
                return Err(PortfolioError::Validation(
                    "factor loadings must be rectangular and nonempty".into(),
                ));
            }
            let loadings = DMatrix::from_fn(n, k, |i, j| cfg.loadings[i][j]);
            let rule = match &cfg.bounds {
                None => FactorRule::Neutralize,
                Some(b) => FactorRule::Bound(b.to_vector(k, "factor bounds")?),
            };
            set.factor_exposure = Some(FactorExposure { loadings, rule });
        }
        if let Some(cfg) = &self.linear {
            let rows = cfg.matrix.len();
            if cfg.matrix.iter().any(|r| r.len() != n) {
                return Err(PortfolioError::Validation(format!(
                    "linear constraint rows must have {n} columns"
                )));
            }
            set.linear = Some(LinearRows {
                matrix: DMatrix::from_fn(rows, n, |i, j| cfg.matrix[i][j]),
                upper: ScalarOrVec::Vector(cfg.upper.clone()).to_vector(rows, "linear upper bounds")?,
            });
        }
        if let Some(cfg) = &self.tracking_error {
            set.tracking_error = Some(TrackingError {
                benchmark: cfg.weights.to_vector(n)?,
                variance_limit: cfg.variance_limit,
            });
        }
        Ok(set)
    }
}

/// The serializable problem statement: objective, constraint blocks and
/// penalty strengths. Moment inputs are attached at instantiation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PortfolioTemplate {
    pub objective: Objective,
    #[serde(default)]
    pub constraints: ConstraintConfig,
    #[serde(default)]
    pub regularization: Regularization,
}

impl PortfolioTemplate {
    pub fn instantiate(
        &self,
        mean: Option<DVector<f64>>,
        covariance: DMatrix<f64>,
        previous: Option<&DVector<f64>>,
    ) -> Result<PortfolioSpec, PortfolioError> {
        let n = covariance.nrows();
        let spec = PortfolioSpec {
            objective: self.objective,
            constraints: self.constraints.instantiate(n, previous)?,
            regularization: self.regularization,
            mean,
            covariance,
        };
        spec.validate()?;
        Ok(spec)
    }
}
