use crate::config::FileConfig;
use crate::output::{display_written, OutputDir};
use anyhow::Result;
use clap::Args;
use qpfolio::ipca;

#[derive(Args)]
pub struct IpcaFitArgs {
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    returns: Option<String>,
    #[arg(long)]
    chars: Option<String>,
    /// Number of latent factors
    #[arg(long)]
    rank: usize,
    /// Rank-transform characteristics to [-0.5, 0.5] per date
    #[arg(long, default_value_t = false)]
    rank_transform: bool,
    #[arg(long, default_value_t = ipca::DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = ipca::DEFAULT_MAX_SWEEPS)]
    max_sweeps: usize,
    #[arg(long)]
    out: Option<String>,
}

pub fn run(args: IpcaFitArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut data = file.data.unwrap_or_default();
    if args.returns.is_some() {
        data.returns = args.returns.clone();
    }
    if args.chars.is_some() {
        data.characteristics = args.chars.clone();
    }
    let out_dir = args
        .out
        .or(file.output.and_then(|o| o.dir))
        .unwrap_or_else(|| ".".into());

    let returns = super::load_returns(&data)?;
    let chars = super::load_characteristics(&data, &returns)?;
    let chars = if args.rank_transform {
        chars.rank_transform()
    } else {
        chars
    };
    let model = ipca::fit_ipca(&returns, &chars, args.rank, args.tol, args.max_sweeps)?;
    let r2 = ipca::ipca_total_r2(&model, &returns, &chars)?;

    let out = OutputDir::create(&out_dir)?;
    let mut written = Vec::new();
    written.push(out.write_json("ipca_model.json", &model.to_json())?);
    written.push(out.write_json(
        "ipca_fit_summary.json",
        &serde_json::json!({
            "rank": args.rank,
            "converged": model.converged,
            "sweeps": model.sweeps,
            "ridge_stabilized": model.ridge_stabilized,
            "total_r2": r2,
        }),
    )?);
    let resolved = serde_json::json!({
        "data": data,
        "ipca": {
            "rank": args.rank,
            "rank_transform": args.rank_transform,
            "tol": args.tol,
            "max_sweeps": args.max_sweeps,
        },
        "output": { "dir": out_dir },
    });
    written.push(out.write_resolved_config(&resolved)?);
    display_written(&written);
    Ok(())
}
