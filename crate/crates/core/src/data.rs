//! Return and characteristic panels, CSV ingestion, and the synthetic
//! panel generator used for tests and demos.
//!
//! Returns travel as simple (net) returns in a wide CSV: a `date` column
//! followed by one column per asset. Characteristics travel in a long CSV
//! keyed by (date, asset_id, characteristic). All generator randomness
//! flows from one 64-bit seed through a counter-based ChaCha stream, so
//! fixtures reproduce bit-for-bit across platforms.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("row {row}: cannot parse date {value:?}")]
    InvalidDate { row: usize, value: String },
    #[error("row {row}, column {column:?}: cannot parse number {value:?}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("duplicate column header {0:?}")]
    DuplicateHeader(String),
    #[error("first column must be `date`, found {0:?}")]
    MissingDateColumn(String),
    #[error("dates must be strictly increasing: {prev} then {next}")]
    DatesNotIncreasing { prev: String, next: String },
    #[error("duplicate asset identifier {0:?}")]
    DuplicateAsset(String),
    #[error("return at date {date}, asset {asset} is {value}, must be finite and > -1")]
    ValueOutOfRange {
        date: String,
        asset: String,
        value: f64,
    },
    #[error("duplicate rows for {0} entries, first: (date {1}, asset {2}, characteristic {3})")]
    DuplicateRows(usize, String, String, String),
    #[error("characteristic set at date {date} differs from the first date")]
    InconsistentCharacteristics { date: String },
    #[error("missing value for asset {asset}, characteristic {name} at date {date}")]
    MissingCell {
        date: String,
        asset: String,
        name: String,
    },
    #[error("factor rank must satisfy 1 <= K <= L, got K = {k}, L = {l}")]
    RankBounds { k: usize, l: usize },
    #[error("panel dimensions must satisfy N >= 1 and T >= 2, got N = {n}, T = {t}")]
    PanelTooSmall { n: usize, t: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

/// How the numbers in a returns file are to be read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnKind {
    #[default]
    Simple,
    /// Log returns; converted to simple returns on load.
    Log,
}

/// A T x N panel of simple returns with date and asset labels. The
/// optional mask marks (date, asset) cells as active; masked-out cells
/// carry no usable value.
#[derive(Debug, Clone)]
pub struct ReturnsPanel {
    dates: Vec<String>,
    assets: Vec<String>,
    values: DMatrix<f64>,
    mask: Option<DMatrix<bool>>,
}

fn validate_dates(dates: &[String]) -> Result<(), DataError> {
    let mut prev: Option<(NaiveDate, &str)> = None;
    for (row, d) in dates.iter().enumerate() {
        let parsed = NaiveDate::parse_from_str(d, "%Y-%m-%d").map_err(|_| {
            DataError::InvalidDate {
                row,
                value: d.clone(),
            }
        })?;
        if let Some((p, ps)) = prev {
            if parsed <= p {
                return Err(DataError::DatesNotIncreasing {
                    prev: ps.to_string(),
                    next: d.clone(),
                });
            }
        }
        prev = Some((parsed, d));
    }
    Ok(())
}

fn validate_assets(assets: &[String]) -> Result<(), DataError> {
    let mut seen = std::collections::BTreeSet::new();
    for a in assets {
        if !seen.insert(a) {
            return Err(DataError::DuplicateAsset(a.clone()));
        }
    }
    Ok(())
}

impl ReturnsPanel {
    pub fn new(
        dates: Vec<String>,
        assets: Vec<String>,
        values: DMatrix<f64>,
        mask: Option<DMatrix<bool>>,
    ) -> Result<Self, DataError> {
        validate_dates(&dates)?;
        validate_assets(&assets)?;
        let (t, n) = values.shape();
        if t != dates.len() || n != assets.len() {
            return Err(DataError::DimensionMismatch(format!(
                "values are {t}x{n} for {} dates and {} assets",
                dates.len(),
                assets.len()
            )));
        }
        if let Some(m) = &mask {
            if m.shape() != (t, n) {
                return Err(DataError::DimensionMismatch(format!(
                    "mask is {}x{}, values are {t}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        for row in 0..t {
            for col in 0..n {
                let active = mask.as_ref().map(|m| m[(row, col)]).unwrap_or(true);
                let v = values[(row, col)];
                if active && (!v.is_finite() || v <= -1.0) {
                    return Err(DataError::ValueOutOfRange {
                        date: dates[row].clone(),
                        asset: assets[col].clone(),
                        value: v,
                    });
                }
            }
        }
        Ok(Self {
            dates,
            assets,
            values,
            mask,
        })
    }

    pub fn n_periods(&self) -> usize {
        self.dates.len()
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> Option<&DMatrix<bool>> {
        self.mask.as_ref()
    }

    pub fn is_active(&self, period: usize, asset: usize) -> bool {
        self.mask
            .as_ref()
            .map(|m| m[(period, asset)])
            .unwrap_or(true)
    }

    /// Pure transform to log returns, `log(1 + r)` per active cell.
    pub fn to_log_returns(&self) -> ReturnsPanel {
        let mut values = self.values.clone();
        for row in 0..self.n_periods() {
            for col in 0..self.n_assets() {
                if self.is_active(row, col) {
                    values[(row, col)] = values[(row, col)].ln_1p();
                }
            }
        }
        ReturnsPanel {
            dates: self.dates.clone(),
            assets: self.assets.clone(),
            values,
            mask: self.mask.clone(),
        }
    }
}

/// Per-date N x L characteristic matrices sharing the returns panel's
/// asset ordering. The optional per-date mask marks (asset) rows observed
/// at that date.
#[derive(Debug, Clone)]
pub struct CharacteristicsPanel {
    dates: Vec<String>,
    assets: Vec<String>,
    names: Vec<String>,
    matrices: Vec<DMatrix<f64>>,
    mask: Option<Vec<Vec<bool>>>,
}

impl CharacteristicsPanel {
    pub fn new(
        dates: Vec<String>,
        assets: Vec<String>,
        names: Vec<String>,
        matrices: Vec<DMatrix<f64>>,
        mask: Option<Vec<Vec<bool>>>,
    ) -> Result<Self, DataError> {
        validate_dates(&dates)?;
        validate_assets(&assets)?;
        if names.is_empty() {
            return Err(DataError::DimensionMismatch(
                "need at least one characteristic".into(),
            ));
        }
        if matrices.len() != dates.len() {
            return Err(DataError::DimensionMismatch(format!(
                "{} matrices for {} dates",
                matrices.len(),
                dates.len()
            )));
        }
        for (idx, m) in matrices.iter().enumerate() {
            if m.shape() != (assets.len(), names.len()) {
                return Err(DataError::DimensionMismatch(format!(
                    "matrix at date {} is {}x{}, expected {}x{}",
                    dates[idx],
                    m.nrows(),
                    m.ncols(),
                    assets.len(),
                    names.len()
                )));
            }
        }
        if let Some(mk) = &mask {
            if mk.len() != dates.len() || mk.iter().any(|v| v.len() != assets.len()) {
                return Err(DataError::DimensionMismatch(
                    "mask shape does not match panel".into(),
                ));
            }
        }
        Ok(Self {
            dates,
            assets,
            names,
            matrices,
            mask,
        })
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn matrix(&self, period: usize) -> &DMatrix<f64> {
        &self.matrices[period]
    }

    pub fn n_characteristics(&self) -> usize {
        self.names.len()
    }

    pub fn is_active(&self, period: usize, asset: usize) -> bool {
        self.mask
            .as_ref()
            .map(|m| m[period][asset])
            .unwrap_or(true)
    }

    /// Reorders the asset axis to match `assets` (e.g. a returns panel's
    /// column order). Every requested asset must be present.
    pub fn reorder_assets(&self, assets: &[String]) -> Result<Self, DataError> {
        let mut index = std::collections::BTreeMap::new();
        for (i, a) in self.assets.iter().enumerate() {
            index.insert(a.as_str(), i);
        }
        let mut order = Vec::with_capacity(assets.len());
        for a in assets {
            match index.get(a.as_str()) {
                Some(&i) => order.push(i),
                None => {
                    return Err(DataError::DimensionMismatch(format!(
                        "characteristics panel has no asset {a:?}"
                    )))
                }
            }
        }
        let matrices = self
            .matrices
            .iter()
            .map(|m| DMatrix::from_fn(order.len(), self.names.len(), |i, j| m[(order[i], j)]))
            .collect();
        let mask = self.mask.as_ref().map(|mk| {
            mk.iter()
                .map(|row| order.iter().map(|&i| row[i]).collect())
                .collect()
        });
        CharacteristicsPanel::new(
            self.dates.clone(),
            assets.to_vec(),
            self.names.clone(),
            matrices,
            mask,
        )
    }

    /// Per-date cross-sectional rank transform of each characteristic to
    /// [-0.5, 0.5], ties sharing the average rank.
    pub fn rank_transform(&self) -> CharacteristicsPanel {
        let n = self.assets.len();
        let matrices = self
            .matrices
            .iter()
            .map(|m| {
                let mut out = m.clone();
                for col in 0..m.ncols() {
                    let mut order: Vec<usize> = (0..n).collect();
                    order.sort_by(|&a, &b| m[(a, col)].total_cmp(&m[(b, col)]));
                    let mut ranks = vec![0.0f64; n];
                    let mut i = 0;
                    while i < n {
                        let mut j = i;
                        while j + 1 < n && m[(order[j + 1], col)] == m[(order[i], col)] {
                            j += 1;
                        }
                        let avg = (i + j) as f64 / 2.0;
                        for &idx in &order[i..=j] {
                            ranks[idx] = avg;
                        }
                        i = j + 1;
                    }
                    let denom = (n.max(2) - 1) as f64;
                    for row in 0..n {
                        out[(row, col)] = ranks[row] / denom - 0.5;
                    }
                }
                out
            })
            .collect();
        CharacteristicsPanel {
            dates: self.dates.clone(),
            assets: self.assets.clone(),
            names: self.names.clone(),
            matrices,
            mask: self.mask.clone(),
        }
    }
}

/// Loads a wide returns CSV: first column `date`, one column per asset.
/// Empty cells become masked entries.
pub fn load_returns_csv<P: AsRef<Path>>(path: P, kind: ReturnKind) -> Result<ReturnsPanel, DataError> {
    let file = std::fs::File::open(path)?;
    read_returns_csv(file, kind)
}

pub fn read_returns_csv<R: Read>(reader: R, kind: ReturnKind) -> Result<ReturnsPanel, DataError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut cols = headers.iter();
    match cols.next() {
        Some("date") => {}
        other => {
            return Err(DataError::MissingDateColumn(
                other.unwrap_or("").to_string(),
            ))
        }
    }
    let assets: Vec<String> = cols.map(|c| c.to_string()).collect();
    {
        let mut seen = std::collections::BTreeSet::new();
        for a in &assets {
            if !seen.insert(a.clone()) {
                return Err(DataError::DuplicateHeader(a.clone()));
            }
        }
    }

    let mut dates = Vec::new();
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    for (row_idx, record) in rdr.records().enumerate() {
        let record = record?;
        let date = record.get(0).unwrap_or("").to_string();
        let mut row = Vec::with_capacity(assets.len());
        for (col_idx, asset) in assets.iter().enumerate() {
            let cell = record.get(col_idx + 1).unwrap_or("").trim();
            if cell.is_empty() {
                row.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| DataError::NonNumeric {
                    row: row_idx + 1,
                    column: asset.clone(),
                    value: cell.to_string(),
                })?;
                let v = match kind {
                    ReturnKind::Simple => v,
                    ReturnKind::Log => v.exp_m1(),
                };
                row.push(Some(v));
            }
        }
        dates.push(date);
        rows.push(row);
    }

    let t = dates.len();
    let n = assets.len();
    let mut values = DMatrix::zeros(t, n);
    let mut mask = DMatrix::from_element(t, n, true);
    let mut any_masked = false;
    for (r, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            match cell {
                Some(v) => values[(r, c)] = *v,
                None => {
                    mask[(r, c)] = false;
                    any_masked = true;
                }
            }
        }
    }
    ReturnsPanel::new(
        dates,
        assets,
        values,
        if any_masked { Some(mask) } else { None },
    )
}

/// Writes a returns panel as wide CSV with shortest round-trip floats;
/// masked cells are written empty.
pub fn write_returns_csv<W: Write>(panel: &ReturnsPanel, out: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["date".to_string()];
    header.extend_from_slice(panel.assets());
    w.write_record(&header)?;
    for row in 0..panel.n_periods() {
        let mut record = vec![panel.dates()[row].clone()];
        for col in 0..panel.n_assets() {
            if panel.is_active(row, col) {
                record.push(format!("{}", panel.values()[(row, col)]));
            } else {
                record.push(String::new());
            }
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a long characteristics CSV with columns
/// `date,asset_id,characteristic,value`. Characteristic and asset
/// orderings are lexicographic. In strict mode every (date, asset,
/// characteristic) cell must be present; otherwise absent cells are
/// masked out at the asset level.
pub fn load_characteristics_csv<P: AsRef<Path>>(
    path: P,
    strict: bool,
) -> Result<CharacteristicsPanel, DataError> {
    let file = std::fs::File::open(path)?;
    read_characteristics_csv(file, strict)
}

pub fn read_characteristics_csv<R: Read>(
    reader: R,
    strict: bool,
) -> Result<CharacteristicsPanel, DataError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut cells: BTreeMap<(String, String, String), f64> = BTreeMap::new();
    let mut duplicates: Vec<(String, String, String)> = Vec::new();
    for (row_idx, record) in rdr.records().enumerate() {
        let record = record?;
        let date = record.get(0).unwrap_or("").to_string();
        let asset = record.get(1).unwrap_or("").to_string();
        let name = record.get(2).unwrap_or("").to_string();
        let raw = record.get(3).unwrap_or("").trim();
        let value: f64 = raw.parse().map_err(|_| DataError::NonNumeric {
            row: row_idx + 1,
            column: "value".into(),
            value: raw.to_string(),
        })?;
        let key = (date, asset, name);
        if cells.insert(key.clone(), value).is_some() {
            duplicates.push(key);
        }
    }
    if let Some((d, a, c)) = duplicates.first() {
        return Err(DataError::DuplicateRows(
            duplicates.len(),
            d.clone(),
            a.clone(),
            c.clone(),
        ));
    }

    let mut dates: Vec<String> = cells.keys().map(|k| k.0.clone()).collect();
    dates.dedup();
    dates.sort();
    dates.dedup();
    let mut assets: Vec<String> = cells.keys().map(|k| k.1.clone()).collect();
    assets.sort();
    assets.dedup();
    let mut names: Vec<String> = cells.keys().map(|k| k.2.clone()).collect();
    names.sort();
    names.dedup();

    let n = assets.len();
    let l = names.len();
    let mut matrices = Vec::with_capacity(dates.len());
    let mut mask: Vec<Vec<bool>> = Vec::with_capacity(dates.len());
    let mut any_masked = false;
    for date in &dates {
        let mut m = DMatrix::zeros(n, l);
        let mut active = vec![true; n];
        for (i, asset) in assets.iter().enumerate() {
            let mut present = 0usize;
            for (j, name) in names.iter().enumerate() {
                match cells.get(&(date.clone(), asset.clone(), name.clone())) {
                    Some(&v) => {
                        m[(i, j)] = v;
                        present += 1;
                    }
                    None => {
                        if strict {
                            return Err(DataError::MissingCell {
                                date: date.clone(),
                                asset: asset.clone(),
                                name: name.clone(),
                            });
                        }
                    }
                }
            }
            if present < l {
                active[i] = false;
                any_masked = true;
            }
        }
        matrices.push(m);
        mask.push(active);
    }
    CharacteristicsPanel::new(
        dates,
        assets,
        names,
        matrices,
        if any_masked { Some(mask) } else { None },
    )
}

/// Writes a characteristics panel in the long format
/// `date,asset_id,characteristic,value`, skipping masked rows.
pub fn write_characteristics_csv<W: Write>(
    panel: &CharacteristicsPanel,
    out: W,
) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "asset_id", "characteristic", "value"])?;
    for (t, date) in panel.dates().iter().enumerate() {
        let m = panel.matrix(t);
        for (i, asset) in panel.assets().iter().enumerate() {
            if !panel.is_active(t, i) {
                continue;
            }
            for (j, name) in panel.names().iter().enumerate() {
                w.write_record([
                    date.as_str(),
                    asset.as_str(),
                    name.as_str(),
                    &format!("{}", m[(i, j)]),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Everything the generator knows that estimators must recover.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    /// L x K loading map, orthonormal columns.
    pub gamma: DMatrix<f64>,
    /// K x (T-1) factor draws; column t is the factor for return date t+1.
    pub factors: DMatrix<f64>,
    pub factor_variances: DVector<f64>,
    pub noise_scale: f64,
    /// True conditional covariance of the returns at date t+1 (index t).
    pub covariances: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticPanel {
    pub returns: ReturnsPanel,
    pub characteristics: CharacteristicsPanel,
    pub truth: SyntheticTruth,
}

/// Compact JSON image of the truth record (per-date covariances are
/// reconstructible from the characteristics, gamma and the noise scale).
#[derive(Serialize, Deserialize)]
pub struct SyntheticTruthJson {
    pub n_assets: usize,
    pub n_periods: usize,
    pub n_characteristics: usize,
    pub rank: usize,
    pub seed: u64,
    pub noise_scale: f64,
    pub gamma_row_major: Vec<f64>,
    pub factor_variances: Vec<f64>,
    pub factors_row_major: Vec<f64>,
}

impl SyntheticPanel {
    pub fn truth_json(&self, seed: u64) -> SyntheticTruthJson {
        let g = &self.truth.gamma;
        let f = &self.truth.factors;
        SyntheticTruthJson {
            n_assets: self.returns.n_assets(),
            n_periods: self.returns.n_periods(),
            n_characteristics: g.nrows(),
            rank: g.ncols(),
            seed,
            noise_scale: self.truth.noise_scale,
            gamma_row_major: (0..g.nrows())
                .flat_map(|i| (0..g.ncols()).map(move |j| (i, j)))
                .map(|(i, j)| g[(i, j)])
                .collect(),
            factor_variances: self.truth.factor_variances.as_slice().to_vec(),
            factors_row_major: (0..f.nrows())
                .flat_map(|i| (0..f.ncols()).map(move |j| (i, j)))
                .map(|(i, j)| f[(i, j)])
                .collect(),
        }
    }
}

fn month_date(index: usize) -> String {
    let year = 1980 + index / 12;
    let month = index % 12 + 1;
    format!("{year:04}-{month:02}-01")
}

/// Generates a characteristic-driven factor panel with known truth:
/// smooth AR(1) characteristics, orthonormal L x K loading map, Gaussian
/// factors with geometrically decaying variances, and isotropic noise of
/// the given scale. Deterministic per seed.
pub fn gen_synthetic_panel(
    n_assets: usize,
    n_periods: usize,
    n_chars: usize,
    rank: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<SyntheticPanel, DataError> {
    if rank == 0 || rank > n_chars {
        return Err(DataError::RankBounds {
            k: rank,
            l: n_chars,
        });
    }
    if n_assets == 0 || n_periods < 2 {
        return Err(DataError::PanelTooSmall {
            n: n_assets,
            t: n_periods,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // smooth per-asset characteristics: stationary AR(1)
    let persistence: f64 = 0.95;
    let innovation = (1.0 - persistence * persistence).sqrt();
    let mut z_mats = Vec::with_capacity(n_periods);
    let mut current = DMatrix::from_fn(n_assets, n_chars, |_, _| {
        rng.sample::<f64, _>(StandardNormal)
    });
    z_mats.push(current.clone());
    for _ in 1..n_periods {
        let next = DMatrix::from_fn(n_assets, n_chars, |i, j| {
            persistence * current[(i, j)] + innovation * rng.sample::<f64, _>(StandardNormal)
        });
        z_mats.push(next.clone());
        current = next;
    }

    // orthonormal loading map with a deterministic sign convention
    let raw = DMatrix::from_fn(n_chars, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = raw.qr();
    let mut gamma = qr.q().columns(0, rank).into_owned();
    for k in 0..rank {
        let col = gamma.column(k);
        let mut idx = 0;
        let mut best = 0.0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                idx = i;
            }
        }
        if gamma[(idx, k)] < 0.0 {
            gamma.column_mut(k).neg_mut();
        }
    }

    // factor variances decay geometrically from a monthly-return scale
    let base_std = 0.02;
    let factor_std = DVector::from_fn(rank, |k, _| base_std * 0.8f64.powi(k as i32));
    let factor_variances = factor_std.map(|s| s * s);

    let t_factors = n_periods - 1;
    let factors = DMatrix::from_fn(rank, t_factors, |k, _| {
        factor_std[k] * rng.sample::<f64, _>(StandardNormal)
    });

    let mut values = DMatrix::zeros(n_periods, n_assets);
    // initial period carries noise only; predictions start at the second
    for j in 0..n_assets {
        values[(0, j)] = noise_scale * rng.sample::<f64, _>(StandardNormal);
    }
    let mut covariances = Vec::with_capacity(t_factors);
    let lambda_f = DMatrix::from_diagonal(&factor_variances);
    for t in 0..t_factors {
        let loadings = &z_mats[t] * &gamma; // N x K
        let f_t = factors.column(t);
        let systematic = &loadings * f_t;
        for j in 0..n_assets {
            values[(t + 1, j)] =
                systematic[j] + noise_scale * rng.sample::<f64, _>(StandardNormal);
        }
        let mut cov = &loadings * &lambda_f * loadings.transpose();
        for j in 0..n_assets {
            cov[(j, j)] += noise_scale * noise_scale;
        }
        covariances.push(cov);
    }

    let dates: Vec<String> = (0..n_periods).map(month_date).collect();
    let assets: Vec<String> = (0..n_assets).map(|i| format!("A{i:04}")).collect();

    let returns = ReturnsPanel::new(dates.clone(), assets.clone(), values, None)?;
    let characteristics = CharacteristicsPanel::new(dates, assets,
        (0..n_chars).map(|i| format!("c{i:02}")).collect(), z_mats, None)?;

    Ok(SyntheticPanel {
        returns,
        characteristics,
        truth: SyntheticTruth {
            gamma,
            factors,
            factor_variances,
            noise_scale,
            covariances,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn wide_csv_parses_small_panel() {
        let text = "date,AAA,BBB\n2020-01-31,0.01,-0.02\n2020-02-29,0.005,0.015\n";
        let panel = read_returns_csv(text.as_bytes(), ReturnKind::Simple).unwrap();
        assert_eq!(panel.n_periods(), 2);
        assert_eq!(panel.n_assets(), 2);
        assert_abs_diff_eq!(panel.values()[(1, 1)], 0.015);
        assert!(panel.mask().is_none());
    }

    #[test]
    fn empty_cell_is_masked() {
        let text = "date,AAA,BBB\n2020-01-31,0.01,\n2020-02-29,0.005,0.015\n";
        let panel = read_returns_csv(text.as_bytes(), ReturnKind::Simple).unwrap();
        assert!(!panel.is_active(0, 1));
        assert!(panel.is_active(0, 0));
        assert!(panel.is_active(1, 1));
    }

    #[test]
    fn invalid_month_is_reported_with_row() {
        let text = "date,AAA\n2020-13-01,0.01\n";
        match read_returns_csv(text.as_bytes(), ReturnKind::Simple) {
            Err(DataError::InvalidDate { row, value }) => {
                assert_eq!(row, 0);
                assert_eq!(value, "2020-13-01");
            }
            other => panic!("expected date error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_header_is_rejected() {
        let text = "date,AAA,AAA\n2020-01-31,0.01,0.02\n";
        assert!(matches!(
            read_returns_csv(text.as_bytes(), ReturnKind::Simple),
            Err(DataError::DuplicateHeader(_))
        ));
    }

    #[test]
    fn log_flag_converts_to_simple() {
        let text = "date,AAA\n2020-01-31,0.0\n2020-02-29,0.1\n";
        let panel = read_returns_csv(text.as_bytes(), ReturnKind::Log).unwrap();
        assert_abs_diff_eq!(panel.values()[(1, 0)], 0.1f64.exp_m1(), epsilon = 1e-15);
    }

    #[test]
    fn round_trip_is_bit_exact_and_keeps_masks() {
        let panel = gen_synthetic_panel(5, 12, 3, 2, 0.01, 77).unwrap().returns;
        // knock out one cell
        let mut mask = DMatrix::from_element(12, 5, true);
        mask[(3, 2)] = false;
        let panel = ReturnsPanel::new(
            panel.dates().to_vec(),
            panel.assets().to_vec(),
            panel.values().clone(),
            Some(mask),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_returns_csv(&panel, &mut buf).unwrap();
        let back = read_returns_csv(buf.as_slice(), ReturnKind::Simple).unwrap();
        assert!(!back.is_active(3, 2));
        for row in 0..12 {
            for col in 0..5 {
                if back.is_active(row, col) {
                    assert_eq!(back.values()[(row, col)], panel.values()[(row, col)]);
                }
            }
        }
    }

    #[test]
    fn long_characteristics_pivot() {
        let text = "date,asset_id,characteristic,value\n\
                    2020-01-31,AAA,size,1.0\n\
                    2020-01-31,AAA,value,2.0\n\
                    2020-01-31,BBB,size,3.0\n\
                    2020-01-31,BBB,value,4.0\n";
        let panel = read_characteristics_csv(text.as_bytes(), true).unwrap();
        assert_eq!(panel.dates().len(), 1);
        assert_eq!(panel.assets(), &["AAA", "BBB"]);
        assert_eq!(panel.names(), &["size", "value"]);
        let m = panel.matrix(0);
        assert_abs_diff_eq!(m[(0, 0)], 1.0);
        assert_abs_diff_eq!(m[(1, 1)], 4.0);
    }

    #[test]
    fn duplicate_characteristic_rows_listed() {
        let text = "date,asset_id,characteristic,value\n\
                    2020-01-31,AAA,size,1.0\n\
                    2020-01-31,AAA,size,1.5\n";
        match read_characteristics_csv(text.as_bytes(), true) {
            Err(DataError::DuplicateRows(count, d, a, c)) => {
                assert_eq!(count, 1);
                assert_eq!(d, "2020-01-31");
                assert_eq!(a, "AAA");
                assert_eq!(c, "size");
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn strict_mode_requires_full_cells() {
        let text = "date,asset_id,characteristic,value\n\
                    2020-01-31,AAA,size,1.0\n\
                    2020-01-31,AAA,value,2.0\n\
                    2020-01-31,BBB,size,3.0\n";
        assert!(matches!(
            read_characteristics_csv(text.as_bytes(), true),
            Err(DataError::MissingCell { .. })
        ));
        let relaxed = read_characteristics_csv(text.as_bytes(), false).unwrap();
        assert!(!relaxed.is_active(0, 1));
        assert!(relaxed.is_active(0, 0));
    }

    #[test]
    fn generator_is_deterministic_per_seed() {
        let a = gen_synthetic_panel(6, 20, 4, 2, 0.01, 42).unwrap();
        let b = gen_synthetic_panel(6, 20, 4, 2, 0.01, 42).unwrap();
        assert_eq!(a.returns.values(), b.returns.values());
        assert_eq!(a.truth.gamma, b.truth.gamma);
        let c = gen_synthetic_panel(6, 20, 4, 2, 0.01, 43).unwrap();
        assert_ne!(a.returns.values(), c.returns.values());
    }

    #[test]
    fn zero_noise_returns_reproduce_factor_structure() {
        let p = gen_synthetic_panel(8, 30, 5, 2, 0.0, 9).unwrap();
        for t in 0..29 {
            let loadings = p.characteristics.matrix(t) * &p.truth.gamma;
            let expected = &loadings * p.truth.factors.column(t);
            for j in 0..8 {
                assert_abs_diff_eq!(
                    p.returns.values()[(t + 1, j)],
                    expected[j],
                    epsilon = 1e-15
                );
            }
        }
    }

    #[test]
    fn generator_rejects_bad_rank() {
        assert!(matches!(
            gen_synthetic_panel(5, 10, 3, 4, 0.0, 1),
            Err(DataError::RankBounds { .. })
        ));
        assert!(matches!(
            gen_synthetic_panel(5, 10, 3, 0, 0.0, 1),
            Err(DataError::RankBounds { .. })
        ));
    }

    #[test]
    fn sample_covariance_tracks_truth_average() {
        let t = 600;
        let p = gen_synthetic_panel(5, t, 4, 2, 0.0, 31).unwrap();
        let sample = crate::covariance::sample_cov(p.returns.values()).unwrap().matrix;
        let mut avg = DMatrix::zeros(5, 5);
        for c in &p.truth.covariances {
            avg += c;
        }
        avg /= p.truth.covariances.len() as f64;
        let rel = (sample - &avg).norm() / avg.norm();
        // Monte Carlo error is O(1/sqrt(T))
        assert!(rel < 8.0 / (t as f64).sqrt(), "relative error {rel}");
    }

    #[test]
    fn rank_transform_maps_to_centered_unit_interval() {
        let p = gen_synthetic_panel(7, 6, 3, 2, 0.01, 5).unwrap();
        let ranked = p.characteristics.rank_transform();
        for t in 0..6 {
            let m = ranked.matrix(t);
            for col in 0..3 {
                let mn = (0..7).map(|i| m[(i, col)]).fold(f64::MAX, f64::min);
                let mx = (0..7).map(|i| m[(i, col)]).fold(f64::MIN, f64::max);
                assert_abs_diff_eq!(mn, -0.5);
                assert_abs_diff_eq!(mx, 0.5);
            }
        }
    }
}
