//! Configuration file schema. A config file carries up to five top-level
//! blocks; command-line flags override file values field by field.

use anyhow::{Context, Result};
use qpfolio::backtest::{EstimatorConfig, UniverseRule};
use qpfolio::data::ReturnKind;
use qpfolio::portfolio::PortfolioTemplate;
use qpfolio::qp::QpSettings;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DataBlock {
    #[serde(default)]
    pub returns: Option<String>,
    #[serde(default)]
    pub characteristics: Option<String>,
    #[serde(default)]
    pub return_kind: Option<ReturnKind>,
    /// strict characteristics loading (every cell present)
    #[serde(default)]
    pub strict: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Default,
    High,
}

impl Precision {
    pub fn settings(self) -> QpSettings {
        match self {
            Precision::Default => QpSettings::DEFAULT,
            Precision::High => QpSettings::HIGH,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BacktestBlock {
    #[serde(default)]
    pub window_length: Option<usize>,
    #[serde(default)]
    pub rebalance_every: Option<usize>,
    #[serde(default)]
    pub universe: Option<UniverseRule>,
    #[serde(default)]
    pub periods_per_year: Option<usize>,
    #[serde(default)]
    pub precision: Option<Precision>,
    /// explicit grid values for the grid command
    #[serde(default)]
    pub l1_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub l2_grid: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OutputBlock {
    #[serde(default)]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FileConfig {
    #[serde(default)]
    pub data: Option<DataBlock>,
    #[serde(default)]
    pub estimator: Option<EstimatorConfig>,
    #[serde(default)]
    pub portfolio: Option<PortfolioTemplate>,
    #[serde(default)]
    pub backtest: Option<BacktestBlock>,
    #[serde(default)]
    pub output: Option<OutputBlock>,
}

impl FileConfig {
    pub fn load(path: Option<&str>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(Path::new(p))
                    .with_context(|| format!("reading config {p}"))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {p}"))
            }
        }
    }
}
