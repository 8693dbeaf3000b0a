use crate::output::{display_written, OutputDir};
use anyhow::{Context, Result};
use clap::Args;
use qpfolio::metrics::{
    compute_metrics, drawdown_profile, end_of_year_returns, rolling_beta, rolling_sharpe,
    rolling_volatility, underwater_series, write_metrics_csv,
};
use std::path::PathBuf;

#[derive(Args)]
pub struct ReportArgs {
    /// Return series CSV with columns date,portfolio_return
    #[arg(long)]
    returns: String,
    /// Optional benchmark series CSV in the same format
    #[arg(long)]
    benchmark: Option<String>,
    #[arg(long, default_value_t = 12)]
    periods_per_year: usize,
    /// Rolling window length in periods for the rolling series
    #[arg(long, default_value_t = 6)]
    rolling_window: usize,
    #[arg(long)]
    out: String,
}

fn load_series(path: &str) -> Result<(Vec<String>, Vec<f64>)> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {path}"))?;
    let mut dates = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record?;
        dates.push(record.get(0).unwrap_or("").to_string());
        let cell = record.get(1).unwrap_or("").trim();
        values.push(
            cell.parse::<f64>()
                .with_context(|| format!("non-numeric return {cell:?} in {path}"))?,
        );
    }
    Ok((dates, values))
}

fn series_csv(
    out: &OutputDir,
    name: &str,
    header: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<PathBuf> {
    out.write_csv_with(name, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(header)?;
        for row in rows {
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    })
}

pub fn run(args: ReportArgs) -> Result<()> {
    let (dates, returns) = load_series(&args.returns)?;
    let benchmark = match &args.benchmark {
        Some(path) => {
            let (bdates, bvalues) = load_series(path)?;
            if bdates != dates {
                anyhow::bail!("benchmark dates do not match the return series");
            }
            Some(bvalues)
        }
        None => None,
    };

    let report = compute_metrics(&returns, benchmark.as_deref(), args.periods_per_year)?;
    let out = OutputDir::create(&args.out)?;
    let mut written = Vec::new();
    written.push(out.write_json("metrics.json", &report)?);
    written.push(out.write_csv_with("metrics.csv", |buf| {
        write_metrics_csv(&[("strategy".to_string(), report.clone())], buf)?;
        Ok(())
    })?);

    // plot-ready series
    let mut equity = 1.0;
    written.push(series_csv(
        &out,
        "cumulative_returns.csv",
        &["date", "cumulative_return"],
        dates.iter().zip(&returns).map(|(d, r)| {
            equity *= 1.0 + r;
            vec![d.clone(), format!("{}", equity - 1.0)]
        }),
    )?);
    written.push(series_csv(
        &out,
        "eoy_returns.csv",
        &["year", "return"],
        end_of_year_returns(&dates, &returns)
            .into_iter()
            .map(|(y, r)| vec![y, format!("{r}")]),
    )?);
    let w = args.rolling_window;
    let sharpe = rolling_sharpe(&returns, w, args.periods_per_year);
    written.push(series_csv(
        &out,
        "rolling_sharpe.csv",
        &["date", "sharpe"],
        sharpe.iter().enumerate().map(|(i, v)| {
            vec![
                dates[i + w - 1].clone(),
                v.map(|x| format!("{x}")).unwrap_or_default(),
            ]
        }),
    )?);
    let vol = rolling_volatility(&returns, w, args.periods_per_year);
    written.push(series_csv(
        &out,
        "rolling_volatility.csv",
        &["date", "volatility_ann"],
        vol.iter().enumerate().map(|(i, v)| {
            vec![
                dates[i + w - 1].clone(),
                v.map(|x| format!("{x}")).unwrap_or_default(),
            ]
        }),
    )?);
    if let Some(bench) = &benchmark {
        let beta6 = rolling_beta(&returns, bench, w);
        let w12 = 2 * w;
        let beta12 = rolling_beta(&returns, bench, w12);
        written.push(series_csv(
            &out,
            "rolling_beta.csv",
            &["date", "beta_short", "beta_long"],
            beta6.iter().enumerate().map(|(i, v)| {
                let long_idx = (i + w - 1).checked_sub(w12 - 1).map(|_| i + w - w12);
                let long = long_idx
                    .and_then(|li| beta12.get(li))
                    .copied()
                    .flatten();
                vec![
                    dates[i + w - 1].clone(),
                    v.map(|x| format!("{x}")).unwrap_or_default(),
                    long.map(|x| format!("{x}")).unwrap_or_default(),
                ]
            }),
        )?);
    }
    written.push(series_csv(
        &out,
        "underwater.csv",
        &["date", "underwater"],
        dates
            .iter()
            .zip(underwater_series(&returns))
            .map(|(d, u)| vec![d.clone(), format!("{u}")]),
    )?);
    written.push(out.write_json(
        "drawdown_episodes.json",
        &drawdown_profile(&returns),
    )?);
    let resolved = serde_json::json!({
        "report": {
            "returns": args.returns,
            "benchmark": args.benchmark,
            "periods_per_year": args.periods_per_year,
            "rolling_window": args.rolling_window,
        },
        "output": { "dir": args.out },
    });
    written.push(out.write_resolved_config(&resolved)?);
    display_written(&written);
    Ok(())
}
