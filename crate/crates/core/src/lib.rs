//! Portfolio optimization through quadratic programming.
//!
//! Minimum-variance, mean-variance and maximum-Sharpe portfolio problems are
//! reformulated into the standard form
//!
//! ```text
//!   minimize    (1/2) x' P x + q' x
//!   subject to  l <= A x <= u
//! ```
//!
//! and solved with the built-in ADMM solver in [`qp`]. The [`portfolio`]
//! module carries out the reformulations (l1/l2 regularization through
//! variable splitting and eigenvalue shifts, long-short books, the
//! max-Sharpe homogenization) and recovers portfolio weights from the QP
//! primal. Covariance inputs come from the estimators in [`covariance`]
//! (sample, linear shrinkage, nonlinear shrinkage) and [`ipca`]
//! (characteristic-instrumented factor model). [`backtest`] runs
//! rolling-window out-of-sample evaluations and regularization grid
//! searches, scored by the [`metrics`] suite.
//!
//! Data-parallel loops (grid cells, frontier targets, Monte Carlo batches)
//! run on rayon when the `parallel` feature is enabled (default) and fall
//! back to sequential iteration otherwise.

pub mod backtest;
pub mod closed_form;
pub mod covariance;
pub mod data;
pub mod ipca;
pub mod ldl;
pub mod metrics;
pub mod par;
pub mod portfolio;
pub mod qp;
pub mod sparse;

pub use portfolio::{ConstraintSet, Objective, PortfolioSpec, Regularization};
pub use qp::{QpProblem, QpSettings, QpSolution, QpStatus};

