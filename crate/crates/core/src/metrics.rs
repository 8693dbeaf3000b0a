//! Performance metrics for out-of-sample return series.
//!
//! The report covers the usual tear-sheet rows: compounded growth,
//! annualized risk/return ratios, drawdown statistics, tail measures and
//! (when a benchmark is supplied) regression statistics. Conventions,
//! stated once here and relied on by the tests:
//!
//! * annualization multiplies by `sqrt(periods_per_year)` for ratios and
//!   volatility; `periods_per_year` is always explicit, never inferred,
//! * the risk-free rate is zero throughout,
//! * value-at-risk is the lower empirical 5% quantile of per-period
//!   returns and the expected shortfall is the mean at or below it,
//! * Sortino uses downside deviation against zero with the full series
//!   count in the denominator,
//! * Kelly is mean over variance of per-period returns,
//! * alpha is the annualized OLS intercept against the benchmark, the
//!   Treynor ratio is the compounded annual growth rate over beta,
//! * time in market proxies position by nonzero returns,
//! * "expected yearly" duplicates the compounded annual growth rate,
//!   mirroring common tear-sheet layouts,
//! * drawdown durations are counted in periods; CSV output adds a
//!   days-per-month display conversion of 30.44 for monthly series.

use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum MetricsError {
    #[error("need at least 2 returns, got {0}")]
    TooShort(usize),
    #[error("benchmark has {benchmark} entries for {series} returns")]
    MisalignedBenchmark { series: usize, benchmark: usize },
    #[error("return at index {index} is {value}; must be finite and > -1")]
    InvalidReturn { index: usize, value: f64 },
    #[error("I/O error: {0}")]
    Io(String),
}

/// Days-per-month constant used only for display conversions of
/// period counts on monthly series.
pub const DAYS_PER_MONTH: f64 = 30.44;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub periods: usize,
    pub periods_per_year: usize,
    pub time_in_market: f64,
    pub cumulative_return: f64,
    pub cagr: f64,
    pub sharpe: Option<f64>,
    pub sortino: Option<f64>,
    pub omega: Option<f64>,
    pub max_drawdown: f64,
    pub longest_dd_periods: usize,
    pub volatility_ann: f64,
    pub calmar: Option<f64>,
    pub kurtosis: f64,
    pub expected_yearly: f64,
    pub kelly: Option<f64>,
    pub var_95: f64,
    pub cvar_95: f64,
    pub avg_drawdown: f64,
    pub avg_dd_periods: f64,
    pub beta: Option<f64>,
    pub alpha: Option<f64>,
    pub correlation: Option<f64>,
    pub treynor: Option<f64>,
}

/// One below-peak stretch of the equity curve. Indices are 0-based
/// positions in the return series; `end` is the first period back at the
/// peak (absent when the series finishes underwater). `length` counts the
/// underwater periods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawdownEpisode {
    pub start: usize,
    pub trough: usize,
    pub end: Option<usize>,
    pub depth: f64,
    pub length: usize,
}

fn validate_returns(returns: &[f64]) -> Result<(), MetricsError> {
    for (index, &value) in returns.iter().enumerate() {
        if !value.is_finite() || value <= -1.0 {
            return Err(MetricsError::InvalidReturn { index, value });
        }
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Running equity curve, starting from one unit of wealth.
fn equity_curve(returns: &[f64]) -> Vec<f64> {
    let mut e = Vec::with_capacity(returns.len());
    let mut acc = 1.0;
    for &r in returns {
        acc *= 1.0 + r;
        e.push(acc);
    }
    e
}

/// Underwater value per period: equity over running peak, minus one.
pub fn underwater_series(returns: &[f64]) -> Vec<f64> {
    let equity = equity_curve(returns);
    let mut peak = 1.0f64;
    equity
        .iter()
        .map(|&e| {
            peak = peak.max(e);
            e / peak - 1.0
        })
        .collect()
}

/// Splits the series into drawdown episodes. Episodes cover exactly the
/// below-peak periods.
pub fn drawdown_profile(returns: &[f64]) -> Vec<DrawdownEpisode> {
    let under = underwater_series(returns);
    let mut episodes = Vec::new();
    let mut current: Option<(usize, usize, f64)> = None; // start, trough, depth
    for (t, &u) in under.iter().enumerate() {
        if u < 0.0 {
            match &mut current {
                None => current = Some((t, t, u)),
                Some((_, trough, depth)) => {
                    if u < *depth {
                        *depth = u;
                        *trough = t;
                    }
                }
            }
        } else if let Some((start, trough, depth)) = current.take() {
            episodes.push(DrawdownEpisode {
                start,
                trough,
                end: Some(t),
                depth,
                length: t - start,
            });
        }
    }
    if let Some((start, trough, depth)) = current {
        episodes.push(DrawdownEpisode {
            start,
            trough,
            end: None,
            depth,
            length: under.len() - start,
        });
    }
    episodes
}

/// Lower empirical 5% quantile.
fn var_95_of(returns: &[f64]) -> f64 {
    let mut sorted = returns.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let idx = ((0.05 * n as f64).ceil() as usize).max(1) - 1;
    sorted[idx]
}

/// Computes the full report. Benchmark-relative fields stay empty without
/// a benchmark series.
pub fn compute_metrics(
    returns: &[f64],
    benchmark: Option<&[f64]>,
    periods_per_year: usize,
) -> Result<MetricReport, MetricsError> {
    let n = returns.len();
    if n < 2 {
        return Err(MetricsError::TooShort(n));
    }
    validate_returns(returns)?;
    if let Some(b) = benchmark {
        if b.len() != n {
            return Err(MetricsError::MisalignedBenchmark {
                series: n,
                benchmark: b.len(),
            });
        }
        validate_returns(b)?;
    }
    let ppy = periods_per_year as f64;
    let nf = n as f64;

    let time_in_market = returns.iter().filter(|&&r| r != 0.0).count() as f64 / nf;
    let growth: f64 = returns.iter().map(|&r| 1.0 + r).product();
    let cumulative_return = growth - 1.0;
    let cagr = growth.powf(ppy / nf) - 1.0;

    let mu = mean(returns);
    let var = sample_variance(returns);
    let sd = var.sqrt();
    let volatility_ann = sd * ppy.sqrt();
    let sharpe = (sd > 0.0).then(|| mu / sd * ppy.sqrt());

    let downside = (returns.iter().map(|&r| r.min(0.0).powi(2)).sum::<f64>() / nf).sqrt();
    let sortino = (downside > 0.0).then(|| mu / downside * ppy.sqrt());

    let gains: f64 = returns.iter().map(|&r| r.max(0.0)).sum();
    let losses: f64 = returns.iter().map(|&r| (-r).max(0.0)).sum();
    let omega = (losses > 0.0).then(|| gains / losses);

    let under = underwater_series(returns);
    let max_drawdown = under.iter().fold(0.0f64, |acc, &u| acc.min(u));
    let episodes = drawdown_profile(returns);
    let longest_dd_periods = episodes.iter().map(|e| e.length).max().unwrap_or(0);
    let avg_drawdown = if episodes.is_empty() {
        0.0
    } else {
        episodes.iter().map(|e| e.depth).sum::<f64>() / episodes.len() as f64
    };
    let avg_dd_periods = if episodes.is_empty() {
        0.0
    } else {
        episodes.iter().map(|e| e.length as f64).sum::<f64>() / episodes.len() as f64
    };
    let calmar = (max_drawdown < 0.0).then(|| cagr / max_drawdown.abs());

    // population excess kurtosis
    let m2 = returns.iter().map(|&r| (r - mu) * (r - mu)).sum::<f64>() / nf;
    let m4 = returns.iter().map(|&r| (r - mu).powi(4)).sum::<f64>() / nf;
    let kurtosis = if m2 > 0.0 { m4 / (m2 * m2) - 3.0 } else { 0.0 };

    let kelly = (var > 0.0).then(|| mu / var);

    let var_95 = var_95_of(returns);
    let tail: Vec<f64> = returns.iter().copied().filter(|&r| r <= var_95).collect();
    let cvar_95 = if tail.is_empty() { var_95 } else { mean(&tail) };

    let (beta, alpha, correlation, treynor) = match benchmark {
        None => (None, None, None, None),
        Some(b) => {
            let mb = mean(b);
            let var_b = sample_variance(b);
            let cov = returns
                .iter()
                .zip(b)
                .map(|(&r, &x)| (r - mu) * (x - mb))
                .sum::<f64>()
                / (nf - 1.0);
            let beta = (var_b > 0.0).then(|| cov / var_b);
            let alpha = beta.map(|bt| (mu - bt * mb) * ppy);
            let correlation = (var_b > 0.0 && var > 0.0).then(|| cov / (sd * var_b.sqrt()));
            let treynor = beta.and_then(|bt| (bt != 0.0).then(|| cagr / bt));
            (beta, alpha, correlation, treynor)
        }
    };

    Ok(MetricReport {
        periods: n,
        periods_per_year,
        time_in_market,
        cumulative_return,
        cagr,
        sharpe,
        sortino,
        omega,
        max_drawdown,
        longest_dd_periods,
        volatility_ann,
        calmar,
        kurtosis,
        expected_yearly: cagr,
        kelly,
        var_95,
        cvar_95,
        avg_drawdown,
        avg_dd_periods,
        beta,
        alpha,
        correlation,
        treynor,
    })
}

/// Annualized Sharpe ratio alone, the backtest grid's score.
pub fn annualized_sharpe(returns: &[f64], periods_per_year: usize) -> Option<f64> {
    if returns.len() < 2 {
        return None;
    }
    let sd = sample_variance(returns).sqrt();
    (sd > 0.0).then(|| mean(returns) / sd * (periods_per_year as f64).sqrt())
}

impl MetricReport {
    /// Row ordering used by the side-by-side CSV.
    pub fn rows(&self) -> Vec<(&'static str, Option<f64>)> {
        let mut rows = vec![
            ("Time in Market", Some(self.time_in_market)),
            ("Cumulative Return", Some(self.cumulative_return)),
            ("CAGR", Some(self.cagr)),
            ("Sharpe", self.sharpe),
            ("Sortino", self.sortino),
            ("Omega", self.omega),
            ("Max Drawdown", Some(self.max_drawdown)),
            (
                "Longest DD Periods",
                Some(self.longest_dd_periods as f64),
            ),
            ("Volatility (ann.)", Some(self.volatility_ann)),
            ("Calmar", self.calmar),
            ("Kurtosis", Some(self.kurtosis)),
            ("Expected Yearly", Some(self.expected_yearly)),
            ("Kelly Criterion", self.kelly),
            ("Value-at-Risk", Some(self.var_95)),
            ("Expected Shortfall", Some(self.cvar_95)),
            ("Avg. Drawdown", Some(self.avg_drawdown)),
            ("Avg. Drawdown Periods", Some(self.avg_dd_periods)),
            ("Beta", self.beta),
            ("Alpha", self.alpha),
            ("Correlation", self.correlation),
            ("Treynor Ratio", self.treynor),
        ];
        if self.periods_per_year == 12 {
            rows.push((
                "Longest DD Days (30.44/mo)",
                Some(self.longest_dd_periods as f64 * DAYS_PER_MONTH),
            ));
            rows.push((
                "Avg. Drawdown Days (30.44/mo)",
                Some(self.avg_dd_periods * DAYS_PER_MONTH),
            ));
        }
        rows
    }
}

/// Side-by-side CSV: one row per metric, one column per strategy.
pub fn write_metrics_csv<W: Write>(
    reports: &[(String, MetricReport)],
    out: W,
) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["metric".to_string()];
    header.extend(reports.iter().map(|(name, _)| name.clone()));
    w.write_record(&header)
        .map_err(|e| MetricsError::Io(e.to_string()))?;
    if let Some((_, first)) = reports.first() {
        let labels: Vec<&'static str> = first.rows().iter().map(|(l, _)| *l).collect();
        for (idx, label) in labels.iter().enumerate() {
            let mut record = vec![label.to_string()];
            for (_, report) in reports {
                let value = report.rows()[idx].1;
                record.push(value.map(|v| format!("{v}")).unwrap_or_default());
            }
            w.write_record(&record)
                .map_err(|e| MetricsError::Io(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| MetricsError::Io(e.to_string()))?;
    Ok(())
}

/// Rolling annualized Sharpe over trailing windows; entry t corresponds to
/// the window ending at period `window - 1 + t`.
pub fn rolling_sharpe(returns: &[f64], window: usize, periods_per_year: usize) -> Vec<Option<f64>> {
    rolling(returns, window, |w| annualized_sharpe(w, periods_per_year))
}

/// Rolling annualized volatility.
pub fn rolling_volatility(
    returns: &[f64],
    window: usize,
    periods_per_year: usize,
) -> Vec<Option<f64>> {
    rolling(returns, window, |w| {
        Some(sample_variance(w).sqrt() * (periods_per_year as f64).sqrt())
    })
}

/// Rolling OLS beta against an aligned benchmark.
pub fn rolling_beta(returns: &[f64], benchmark: &[f64], window: usize) -> Vec<Option<f64>> {
    if returns.len() != benchmark.len() || returns.len() < window || window < 2 {
        return Vec::new();
    }
    (0..=returns.len() - window)
        .map(|start| {
            let r = &returns[start..start + window];
            let b = &benchmark[start..start + window];
            let mb = mean(b);
            let mr = mean(r);
            let var_b = sample_variance(b);
            if var_b <= 0.0 {
                return None;
            }
            let cov = r
                .iter()
                .zip(b)
                .map(|(&x, &y)| (x - mr) * (y - mb))
                .sum::<f64>()
                / (window as f64 - 1.0);
            Some(cov / var_b)
        })
        .collect()
}

fn rolling<F: Fn(&[f64]) -> Option<f64>>(
    returns: &[f64],
    window: usize,
    f: F,
) -> Vec<Option<f64>> {
    if returns.len() < window || window < 2 {
        return Vec::new();
    }
    (0..=returns.len() - window)
        .map(|start| f(&returns[start..start + window]))
        .collect()
}

/// Compounds returns within each calendar year; dates must be ISO-8601.
pub fn end_of_year_returns(dates: &[String], returns: &[f64]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for (date, &r) in dates.iter().zip(returns) {
        let year = date.get(0..4).unwrap_or("????").to_string();
        match out.last_mut() {
            Some((y, acc)) if *y == year => *acc = (1.0 + *acc) * (1.0 + r) - 1.0,
            _ => out.push((year, r)),
        }
    }
    out
}
