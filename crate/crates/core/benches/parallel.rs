//! Data-parallel workloads, parallel versus sequential.
//!
//! The rayon-backed `par::map` path (active under the default `parallel`
//! feature) is compared against its always-sequential twin on the three
//! embarrassingly parallel inner loops of the library: regularization
//! grid cells (one small backtest each), frontier target sweeps, and
//! Monte Carlo evaluation of random simplex portfolios.

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::{DMatrix, DVector};
use qpfolio::backtest::{run_backtest, BacktestConfig, EstimatorConfig, UniverseRule};
use qpfolio::data::gen_synthetic_panel;
use qpfolio::metrics::annualized_sharpe;
use qpfolio::par;
use qpfolio::portfolio::{
    random_dirichlet_portfolios, solve_portfolio, ConstraintConfig, ConstraintSet, Objective,
    PortfolioSpec, PortfolioTemplate, Regularization,
};
use qpfolio::qp::QpSettings;
use std::hint::black_box;

fn grid_cell_config(l1: f64, l2: f64) -> BacktestConfig {
    BacktestConfig {
        window_length: 36,
        rebalance_every: 1,
        estimator: EstimatorConfig::Sample { repair_floor: None },
        template: PortfolioTemplate {
            objective: Objective::MinVariance,
            constraints: ConstraintConfig::long_only(),
            regularization: Regularization::new(l1, l2),
        },
        universe: UniverseRule::FullHistoryOnly,
        periods_per_year: 12,
        solver: QpSettings::HIGH,
    }
}

fn bench_grid_cells(c: &mut Criterion) {
    let panel = gen_synthetic_panel(12, 60, 4, 2, 0.015, 9).unwrap().returns;
    let pairs: Vec<(f64, f64)> = [0.0, 1e-4, 1e-3, 1e-2]
        .iter()
        .flat_map(|&l1| [0.0, 0.05, 0.5].iter().map(move |&l2| (l1, l2)))
        .collect();
    let cell = |(l1, l2): (f64, f64)| {
        let result = run_backtest(&panel, None, &grid_cell_config(l1, l2)).unwrap();
        annualized_sharpe(&result.oos_returns, 12)
    };

    let mut group = c.benchmark_group("grid_cells");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| black_box(par::map(pairs.clone(), cell)))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| black_box(par::map_seq(pairs.clone(), cell)))
    });
    group.finish();
}

fn bench_frontier_targets(c: &mut Criterion) {
    let panel = gen_synthetic_panel(25, 120, 4, 2, 0.015, 11).unwrap().returns;
    let sigma = qpfolio::covariance::sample_cov(panel.values()).unwrap().matrix;
    let t = panel.n_periods() as f64;
    let mu = DVector::from_fn(25, |j, _| panel.values().column(j).sum() / t);
    let lo = mu.min();
    let hi = mu.max();
    let targets: Vec<f64> = (0..16)
        .map(|k| lo + (hi - lo) * k as f64 / 15.0)
        .collect();
    let solve_target = |target: f64| {
        let spec = PortfolioSpec {
            objective: Objective::MeanVariance {
                target_mean: target,
            },
            constraints: ConstraintSet::long_only(25),
            regularization: Regularization::none(),
            mean: Some(mu.clone()),
            covariance: sigma.clone(),
        };
        solve_portfolio(&spec, &QpSettings::HIGH)
            .map(|s| s.weights)
            .ok()
    };

    let mut group = c.benchmark_group("frontier_targets");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| black_box(par::map(targets.clone(), solve_target)))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| black_box(par::map_seq(targets.clone(), solve_target)))
    });
    group.finish();
}

fn bench_random_portfolio_moments(c: &mut Criterion) {
    let n = 40;
    let draws = random_dirichlet_portfolios(n, 4000, 3).unwrap();
    let g = DMatrix::from_fn(n, n, |i, j| ((i * 31 + j * 17) % 13) as f64 / 13.0 - 0.5);
    let sigma = &g * g.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1;
    let variance_of = |d: usize| {
        let w = draws.row(d).transpose();
        (w.transpose() * &sigma * &w)[(0, 0)]
    };

    let mut group = c.benchmark_group("random_portfolio_moments");
    group.sample_size(20);
    group.bench_function("parallel", |b| {
        b.iter(|| black_box(par::map_indexed(4000, variance_of)))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| black_box(par::map_indexed_seq(4000, variance_of)))
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_grid_cells,
    bench_frontier_targets,
    bench_random_portfolio_moments
);
criterion_main!(benches);
