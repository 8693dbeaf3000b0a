use crate::output::{display_written, OutputDir};
use anyhow::Result;
use clap::Args;
use qpfolio::backtest::{run_backtest, BacktestConfig, EstimatorConfig, UniverseRule};
use qpfolio::data::gen_synthetic_panel;
use qpfolio::portfolio::{ConstraintConfig, Objective, PortfolioTemplate, Regularization, ScalarOrVec};
use std::time::Instant;

#[derive(Args)]
pub struct BenchArgs {
    /// Universe size
    #[arg(long, default_value_t = 50)]
    n: usize,
    /// Problem class: minvar-lo | maxsharpe-lo | maxsharpe-l1l2
    #[arg(long, default_value = "maxsharpe-l1l2")]
    problem: String,
    /// Number of rolling windows (one solve each)
    #[arg(long, default_value_t = 100)]
    windows: usize,
    /// Solver precision: default | high
    #[arg(long, default_value = "high")]
    precision: String,
    /// Estimation window length in periods
    #[arg(long, default_value_t = 360)]
    window_length: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: Option<String>,
}

fn template_for(problem: &str) -> Result<PortfolioTemplate> {
    let template = match problem {
        "minvar-lo" => PortfolioTemplate {
            objective: Objective::MinVariance,
            constraints: ConstraintConfig::long_only(),
            regularization: Regularization::none(),
        },
        "maxsharpe-lo" => PortfolioTemplate {
            objective: Objective::MaxSharpe { riskfree_rate: 0.0 },
            constraints: ConstraintConfig::long_only(),
            regularization: Regularization::none(),
        },
        "maxsharpe-l1l2" => PortfolioTemplate {
            objective: Objective::MaxSharpe { riskfree_rate: 0.0 },
            constraints: ConstraintConfig {
                box_lower: Some(ScalarOrVec::Scalar(-0.08)),
                box_upper: Some(ScalarOrVec::Scalar(0.08)),
                long_short: Some(0.2),
                ..ConstraintConfig::default()
            },
            regularization: Regularization::new(0.001, 0.1),
        },
        other => anyhow::bail!(
            "unknown problem {other:?}; expected minvar-lo, maxsharpe-lo or maxsharpe-l1l2"
        ),
    };
    Ok(template)
}

pub fn run(args: BenchArgs) -> Result<()> {
    let template = template_for(&args.problem)?;
    let precision = super::optimize::parse_precision(Some(&args.precision), None)?;
    // the l2 spectrum shift already floors singular sample estimates;
    // unregularized problems need the explicit repair instead
    let repair_floor = if template.regularization.l2 > 0.0 {
        None
    } else {
        Some(1e-8)
    };
    let panel = gen_synthetic_panel(
        args.n,
        args.window_length + args.windows,
        8,
        3,
        0.03,
        args.seed,
    )?
    .returns;
    let config = BacktestConfig {
        window_length: args.window_length,
        rebalance_every: 1,
        estimator: EstimatorConfig::Sample { repair_floor },
        template,
        universe: UniverseRule::FullHistoryOnly,
        periods_per_year: 12,
        solver: precision.settings(),
    };

    let start = Instant::now();
    let result = run_backtest(&panel, None, &config)?;
    let elapsed = start.elapsed().as_secs_f64();

    let timing = serde_json::json!({
        "problem": args.problem,
        "n": args.n,
        "windows": args.windows,
        "window_length": args.window_length,
        "precision": precision,
        "seed": args.seed,
        "total_seconds": elapsed,
        "per_window_seconds": elapsed / args.windows as f64,
        "rebalances": result.diagnostics.rebalances,
        "loose_solves": result.diagnostics.loose_solves,
        "solver_failures": result.diagnostics.solver_failures,
        "estimator_failures": result.diagnostics.estimator_failures,
    });
    println!("{}", serde_json::to_string_pretty(&timing)?);
    if let Some(dir) = args.out {
        let out = OutputDir::create(&dir)?;
        let mut written = Vec::new();
        written.push(out.write_json("bench_timing.json", &timing)?);
        written.push(out.write_resolved_config(&timing)?);
        display_written(&written);
    }
    Ok(())
}
