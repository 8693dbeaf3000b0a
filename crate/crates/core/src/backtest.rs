//! Rolling-window out-of-sample evaluation.
//!
//! The engine slides a fixed-length estimation window over the panel:
//! weights for period `s` are built only from periods `[s - W, s)`, so the
//! decision at any date is a deterministic function of strictly earlier
//! data. Between rebalances the book drifts buy-and-hold with realized
//! returns; at each rebalance the drifted book (restricted to the current
//! universe and renormalized) is the reference for turnover constraints
//! and the turnover measurement. Estimator or solver failures carry the
//! previous book forward and are flagged, keeping the return series gap
//! free. `grid_search` runs one full backtest per regularization pair,
//! independently and reproducibly; cells execute in parallel under the
//! `parallel` feature.

use crate::covariance::{self, CovarianceEstimate};
use crate::data::{CharacteristicsPanel, ReturnsPanel};
use crate::ipca;
use crate::metrics::annualized_sharpe;
use crate::par;
use crate::portfolio::{self, PortfolioTemplate};
use crate::qp::QpSettings;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum BacktestError {
    #[error("panel has {periods} periods; need more than the window length {window}")]
    PanelTooShort { periods: usize, window: usize },
    #[error("window length must be at least 2, got {0}")]
    WindowTooShort(usize),
    #[error("rebalance interval must be at least 1")]
    ZeroRebalanceInterval,
    #[error("the IPCA estimator needs a characteristics panel")]
    MissingCharacteristics,
    #[error("characteristics panel is misaligned with the returns panel: {0}")]
    MisalignedCharacteristics(String),
    #[error("regularization grid is empty")]
    EmptyGrid,
    #[error("portfolio error: {0}")]
    Portfolio(#[from] portfolio::PortfolioError),
    #[error("I/O error: {0}")]
    Io(String),
}

fn default_tol() -> f64 {
    ipca::DEFAULT_TOL
}

fn default_sweeps() -> usize {
    ipca::DEFAULT_MAX_SWEEPS
}

/// Which covariance estimator each window uses.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorConfig {
    Sample {
        /// Spectrum floor (relative to the top eigenvalue) applied when
        /// the window is shorter than the universe; `None` disables it.
        #[serde(default)]
        repair_floor: Option<f64>,
    },
    LinearShrinkage,
    Qis,
    Ipca {
        rank: usize,
        #[serde(default)]
        rank_transform: bool,
        #[serde(default = "default_tol")]
        tol: f64,
        #[serde(default = "default_sweeps")]
        max_sweeps: usize,
    },
}

/// Universe selection at each rebalance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UniverseRule {
    /// Keep assets with complete (unmasked) returns over the whole
    /// trailing window.
    FullHistoryOnly,
    /// Keep assets marked active at the decision date; missing in-window
    /// values are imputed as zero returns for estimation.
    MembershipMask,
}

fn default_window() -> usize {
    360
}

fn default_rebalance() -> usize {
    1
}

fn default_ppy() -> usize {
    12
}

fn default_universe() -> UniverseRule {
    UniverseRule::FullHistoryOnly
}

fn default_settings() -> QpSettings {
    QpSettings::HIGH
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BacktestConfig {
    #[serde(default = "default_window")]
    pub window_length: usize,
    #[serde(default = "default_rebalance")]
    pub rebalance_every: usize,
    pub estimator: EstimatorConfig,
    pub template: PortfolioTemplate,
    #[serde(default = "default_universe")]
    pub universe: UniverseRule,
    #[serde(default = "default_ppy")]
    pub periods_per_year: usize,
    #[serde(default = "default_settings")]
    pub solver: QpSettings,
}

impl BacktestConfig {
    fn validate(&self, panel: &ReturnsPanel) -> Result<(), BacktestError> {
        if self.window_length < 2 {
            return Err(BacktestError::WindowTooShort(self.window_length));
        }
        if self.rebalance_every == 0 {
            return Err(BacktestError::ZeroRebalanceInterval);
        }
        if panel.n_periods() <= self.window_length {
            return Err(BacktestError::PanelTooShort {
                periods: panel.n_periods(),
                window: self.window_length,
            });
        }
        Ok(())
    }
}

/// The book decided at one rebalance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightRecord {
    /// First out-of-sample date the weights apply to.
    pub date: String,
    pub assets: Vec<String>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BacktestDiagnostics {
    pub rebalances: usize,
    pub solver_failures: usize,
    pub estimator_failures: usize,
    /// Iteration-capped solves accepted through the loose residual gate.
    pub loose_solves: usize,
    pub empty_universe_events: usize,
    pub missing_return_events: usize,
    /// One line per failure, with the decision date.
    pub events: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct BacktestResult {
    /// Out-of-sample period labels, one per realized return.
    pub dates: Vec<String>,
    pub oos_returns: Vec<f64>,
    pub weights_history: Vec<WeightRecord>,
    /// L1 distance between the new book and the drifted previous book at
    /// each rebalance; the first entry is the full buy-in from cash.
    pub turnover_series: Vec<f64>,
    pub diagnostics: BacktestDiagnostics,
}

fn estimate_covariance(
    estimator: &EstimatorConfig,
    window_returns: &DMatrix<f64>,
    window_chars: Option<&[DMatrix<f64>]>,
) -> Result<CovarianceEstimate, String> {
    match estimator {
        EstimatorConfig::Sample { repair_floor } => {
            let est = covariance::sample_cov(window_returns).map_err(|e| e.to_string())?;
            match repair_floor {
                Some(floor) => covariance::repair_singular(&est, *floor).map_err(|e| e.to_string()),
                None => Ok(est),
            }
        }
        EstimatorConfig::LinearShrinkage => {
            covariance::linear_shrinkage(window_returns).map_err(|e| e.to_string())
        }
        EstimatorConfig::Qis => covariance::qis_shrinkage(window_returns).map_err(|e| e.to_string()),
        EstimatorConfig::Ipca {
            rank,
            rank_transform,
            tol,
            max_sweeps,
        } => {
            let mats = window_chars.ok_or("IPCA estimator without characteristics")?;
            let w = window_returns.nrows();
            let n = window_returns.ncols();
            // panel slices with placeholder labels; the fit only needs the
            // alignment, not the labels themselves
            let dates: Vec<String> = (0..w)
                .map(|i| format!("{:04}-{:02}-01", 1000 + i / 12, i % 12 + 1))
                .collect();
            let assets: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
            let names: Vec<String> = (0..mats[0].ncols()).map(|i| format!("c{i}")).collect();
            let returns =
                ReturnsPanel::new(dates.clone(), assets.clone(), window_returns.clone(), None)
                    .map_err(|e| e.to_string())?;
            let chars = CharacteristicsPanel::new(dates, assets, names, mats.to_vec(), None)
                .map_err(|e| e.to_string())?;
            let chars = if *rank_transform {
                chars.rank_transform()
            } else {
                chars
            };
            let model =
                ipca::fit_ipca(&returns, &chars, *rank, *tol, *max_sweeps).map_err(|e| e.to_string())?;
            // forecast with the most recent characteristics
            let z_latest = chars.matrix(w - 1);
            ipca::ipca_covariance(&model, z_latest).map_err(|e| e.to_string())
        }
    }
}

/// Runs the rolling-window backtest. `chars` is required for the IPCA
/// estimator and must share the returns panel's date and asset grids.
pub fn run_backtest(
    returns: &ReturnsPanel,
    chars: Option<&CharacteristicsPanel>,
    config: &BacktestConfig,
) -> Result<BacktestResult, BacktestError> {
    config.validate(returns)?;
    if matches!(config.estimator, EstimatorConfig::Ipca { .. }) {
        let chars = chars.ok_or(BacktestError::MissingCharacteristics)?;
        if chars.dates() != returns.dates() {
            return Err(BacktestError::MisalignedCharacteristics(
                "date grids differ".into(),
            ));
        }
        if chars.assets() != returns.assets() {
            return Err(BacktestError::MisalignedCharacteristics(
                "asset orderings differ".into(),
            ));
        }
    }

    let t = returns.n_periods();
    let n_total = returns.n_assets();
    let window = config.window_length;
    let values = returns.values();

    let mut book = DVector::<f64>::zeros(n_total);
    let mut has_book = false;
    let mut result = BacktestResult {
        dates: Vec::with_capacity(t - window),
        oos_returns: Vec::with_capacity(t - window),
        weights_history: Vec::new(),
        turnover_series: Vec::new(),
        diagnostics: BacktestDiagnostics::default(),
    };

    for s in window..t {
        let step = s - window;
        if step % config.rebalance_every == 0 {
            rebalance(
                returns,
                chars,
                config,
                s,
                &mut book,
                &mut has_book,
                &mut result,
            );
        }

        // realize the period-s return of the current book
        let mut r_s = 0.0;
        for i in 0..n_total {
            if book[i] != 0.0 {
                if returns.is_active(s, i) {
                    r_s += book[i] * values[(s, i)];
                } else {
                    result.diagnostics.missing_return_events += 1;
                }
            }
        }
        result.dates.push(returns.dates()[s].clone());
        result.oos_returns.push(r_s);

        // buy-and-hold drift within the period
        if has_book && 1.0 + r_s > 0.0 {
            for i in 0..n_total {
                if book[i] != 0.0 {
                    let growth = if returns.is_active(s, i) {
                        1.0 + values[(s, i)]
                    } else {
                        1.0
                    };
                    book[i] *= growth / (1.0 + r_s);
                }
            }
        }
    }
    Ok(result)
}

#[allow(clippy::too_many_arguments)]
fn rebalance(
    returns: &ReturnsPanel,
    chars: Option<&CharacteristicsPanel>,
    config: &BacktestConfig,
    s: usize,
    book: &mut DVector<f64>,
    has_book: &mut bool,
    result: &mut BacktestResult,
) {
    let window = config.window_length;
    let n_total = returns.n_assets();
    let values = returns.values();
    let date = returns.dates()[s].clone();
    result.diagnostics.rebalances += 1;

    // universe at this decision, from data strictly before s
    let active: Vec<usize> = (0..n_total)
        .filter(|&i| match config.universe {
            UniverseRule::FullHistoryOnly => (s - window..s).all(|t| returns.is_active(t, i)),
            UniverseRule::MembershipMask => returns.is_active(s - 1, i),
        })
        .collect();
    if active.is_empty() {
        result.diagnostics.empty_universe_events += 1;
        result
            .diagnostics
            .events
            .push(format!("{date}: empty universe, book carried forward"));
        return;
    }
    let n_active = active.len();

    // trailing window of returns for the active universe; masked values
    // are imputed as zero in membership mode (they cannot occur in
    // full-history mode)
    let mut window_returns = DMatrix::zeros(window, n_active);
    for (col, &asset) in active.iter().enumerate() {
        for (row, t_idx) in (s - window..s).enumerate() {
            window_returns[(row, col)] = if returns.is_active(t_idx, asset) {
                values[(t_idx, asset)]
            } else {
                0.0
            };
        }
    }

    // drifted previous book restricted to the active set, renormalized;
    // weight on exited assets is released here
    let previous_active = if *has_book {
        let mut prev = DVector::from_fn(n_active, |k, _| book[active[k]]);
        let total = prev.sum();
        if total.abs() > 1e-12 {
            prev /= total;
        }
        Some(prev)
    } else {
        None
    };

    let mu = DVector::from_fn(n_active, |j, _| window_returns.column(j).sum() / window as f64);

    let window_chars: Option<Vec<DMatrix<f64>>> = chars.map(|cp| {
        (s - window..s)
            .map(|t_idx| {
                let full = cp.matrix(t_idx);
                DMatrix::from_fn(n_active, full.ncols(), |k, l| full[(active[k], l)])
            })
            .collect()
    });

    let estimate = match estimate_covariance(
        &config.estimator,
        &window_returns,
        window_chars.as_deref(),
    ) {
        Ok(est) => est,
        Err(message) => {
            result.diagnostics.estimator_failures += 1;
            result
                .diagnostics
                .events
                .push(format!("{date}: estimator failed ({message})"));
            carry_forward(book, has_book, &active, previous_active.as_ref());
            return;
        }
    };

    let solved = config
        .template
        .instantiate(Some(mu), estimate.matrix, previous_active.as_ref())
        .and_then(|spec| {
            if spec.constraints.tracking_error.is_some() {
                portfolio::solve_with_tracking_error(&spec, &config.solver).map(|s| s.weights)
            } else {
                solve_allowing_near_solutions(&spec, &config.solver, &date, result)
            }
        });
    match solved {
        Ok(weights) => {
            let turnover = match &previous_active {
                Some(prev) => (&weights - prev).abs().sum(),
                None => weights.abs().sum(),
            };
            result.turnover_series.push(turnover);
            book.fill(0.0);
            for (k, &asset) in active.iter().enumerate() {
                book[asset] = weights[k];
            }
            *has_book = true;
            result.weights_history.push(WeightRecord {
                date,
                assets: active.iter().map(|&i| returns.assets()[i].clone()).collect(),
                weights: weights.as_slice().to_vec(),
            });
        }
        Err(error) => {
            result.diagnostics.solver_failures += 1;
            result
                .diagnostics
                .events
                .push(format!("{date}: solve failed ({error})"));
            carry_forward(book, has_book, &active, previous_active.as_ref());
        }
    }
}

/// Residual gate for accepting an iteration-capped solve: high-precision
/// runs cap dense problems at 10^4 iterations, and the near-solution is
/// still a usable book when its KKT residuals are small at this looser
/// tolerance.
const LOOSE_GATE: QpSettings = QpSettings {
    eps_abs: 1e-4,
    eps_rel: 1e-4,
    ..QpSettings::HIGH
};

fn solve_allowing_near_solutions(
    spec: &portfolio::PortfolioSpec,
    settings: &QpSettings,
    date: &str,
    result: &mut BacktestResult,
) -> Result<DVector<f64>, portfolio::PortfolioError> {
    let reform = portfolio::build_qp(spec)?;
    let solution = crate::qp::solve_qp(&reform.qp, settings)?;
    match solution.status {
        crate::qp::QpStatus::Solved => portfolio::recover_weights(&reform, &solution),
        crate::qp::QpStatus::MaxIterReached => {
            let report = crate::qp::check_kkt(&reform.qp, &solution, &LOOSE_GATE)?;
            if report.primal <= report.eps_primal && report.dual <= report.eps_dual {
                result.diagnostics.loose_solves += 1;
                result.diagnostics.events.push(format!(
                    "{date}: iteration cap hit, accepted at residuals {:.2e}/{:.2e}",
                    report.primal, report.dual
                ));
                portfolio::recover_weights_from(&reform, &solution.x)
            } else {
                Err(portfolio::PortfolioError::NotSolved(solution.status))
            }
        }
        other => Err(portfolio::PortfolioError::NotSolved(other)),
    }
}

/// Keeps the previous book, restricted to the active universe and
/// renormalized.
fn carry_forward(
    book: &mut DVector<f64>,
    has_book: &mut bool,
    active: &[usize],
    previous_active: Option<&DVector<f64>>,
) {
    if let Some(prev) = previous_active {
        let mut next = DVector::zeros(book.len());
        for (k, &asset) in active.iter().enumerate() {
            next[asset] = prev[k];
        }
        *book = next;
        *has_book = true;
    }
    // with no previous book the engine stays in cash until a solve lands
}

/// One cell of the regularization grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub l1: f64,
    pub l2: f64,
    pub valid: bool,
    pub sharpe: Option<f64>,
    pub delta_vs_baseline: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearchResult {
    /// Sharpe of the unregularized (l1 = l2 = 0) backtest.
    pub baseline_sharpe: Option<f64>,
    pub cells: Vec<GridCell>,
    /// (l1, l2, sharpe) of the best valid cell.
    pub best: Option<(f64, f64, f64)>,
}

/// Geometric grid over the standard l1 range [1e-6, 0.1].
pub fn default_l1_grid(points: usize) -> Vec<f64> {
    geometric_grid(1e-6, 0.1, points)
}

/// Geometric grid over the standard l2 range [1e-2, 5].
pub fn default_l2_grid(points: usize) -> Vec<f64> {
    geometric_grid(1e-2, 5.0, points)
}

fn geometric_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points <= 1 {
        return vec![lo];
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..points)
        .map(|k| (llo + (lhi - llo) * k as f64 / (points - 1) as f64).exp())
        .collect()
}

fn run_cell(
    returns: &ReturnsPanel,
    chars: Option<&CharacteristicsPanel>,
    config: &BacktestConfig,
    l1: f64,
    l2: f64,
) -> Result<Option<f64>, String> {
    let mut cell_config = config.clone();
    cell_config.template.regularization = portfolio::Regularization::new(l1, l2);
    let outcome = run_backtest(returns, chars, &cell_config).map_err(|e| e.to_string())?;
    Ok(annualized_sharpe(
        &outcome.oos_returns,
        config.periods_per_year,
    ))
}

/// One full backtest per (l1, l2) pair. Cells are independent; a failed
/// cell is marked invalid and the search continues. The baseline is the
/// unregularized backtest, computed through the identical cell path.
pub fn grid_search(
    returns: &ReturnsPanel,
    chars: Option<&CharacteristicsPanel>,
    config: &BacktestConfig,
    l1_values: &[f64],
    l2_values: &[f64],
) -> Result<GridSearchResult, BacktestError> {
    if l1_values.is_empty() || l2_values.is_empty() {
        return Err(BacktestError::EmptyGrid);
    }
    let baseline_sharpe = run_cell(returns, chars, config, 0.0, 0.0)
        .ok()
        .flatten();

    let pairs: Vec<(f64, f64)> = l1_values
        .iter()
        .flat_map(|&l1| l2_values.iter().map(move |&l2| (l1, l2)))
        .collect();
    let cells: Vec<GridCell> = par::map(pairs, |(l1, l2)| {
        match run_cell(returns, chars, config, l1, l2) {
            Ok(sharpe) => GridCell {
                l1,
                l2,
                valid: true,
                sharpe,
                delta_vs_baseline: match (sharpe, baseline_sharpe) {
                    (Some(s), Some(b)) => Some(s - b),
                    _ => None,
                },
                error: None,
            },
            Err(error) => GridCell {
                l1,
                l2,
                valid: false,
                sharpe: None,
                delta_vs_baseline: None,
                error: Some(error),
            },
        }
    });

    let best = cells
        .iter()
        .filter(|c| c.valid)
        .filter_map(|c| c.sharpe.map(|s| (c.l1, c.l2, s)))
        .max_by(|a, b| a.2.total_cmp(&b.2));

    Ok(GridSearchResult {
        baseline_sharpe,
        cells,
        best,
    })
}

/// CSV of the realized return series: `date,portfolio_return`.
pub fn write_returns_series_csv<W: Write>(
    result: &BacktestResult,
    out: W,
) -> Result<(), BacktestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "portfolio_return"])
        .map_err(|e| BacktestError::Io(e.to_string()))?;
    for (date, r) in result.dates.iter().zip(&result.oos_returns) {
        w.write_record([date.as_str(), &format!("{r}")])
            .map_err(|e| BacktestError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| BacktestError::Io(e.to_string()))?;
    Ok(())
}

/// CSV of the weight history: `date,asset_id,weight`.
pub fn write_weights_csv<W: Write>(result: &BacktestResult, out: W) -> Result<(), BacktestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "asset_id", "weight"])
        .map_err(|e| BacktestError::Io(e.to_string()))?;
    for record in &result.weights_history {
        for (asset, weight) in record.assets.iter().zip(&record.weights) {
            w.write_record([record.date.as_str(), asset.as_str(), &format!("{weight}")])
                .map_err(|e| BacktestError::Io(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| BacktestError::Io(e.to_string()))?;
    Ok(())
}

/// Heatmap CSV in the grid layout: `lambda1,lambda2,sharpe,delta_vs_baseline`.
pub fn write_grid_csv<W: Write>(result: &GridSearchResult, out: W) -> Result<(), BacktestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda1", "lambda2", "sharpe", "delta_vs_baseline"])
        .map_err(|e| BacktestError::Io(e.to_string()))?;
    for cell in &result.cells {
        let sharpe = cell.sharpe.map(|v| format!("{v}")).unwrap_or_default();
        let delta = cell
            .delta_vs_baseline
            .map(|v| format!("{v}"))
            .unwrap_or_default();
        w.write_record([
            format!("{}", cell.l1),
            format!("{}", cell.l2),
            sharpe,
            delta,
        ])
        .map_err(|e| BacktestError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| BacktestError::Io(e.to_string()))?;
    Ok(())
}
