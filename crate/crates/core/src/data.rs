//! OHLCV ingestion, cleaning, min-max scaling, lookback windowing,
//! chronological splitting, and a seeded synthetic market generator.
//!
//! CSV schema (header must match exactly):
//!
//! ```text
//! date,open,high,low,close,adj_close,volume
//! ```
//!
//! Dates are ISO-8601 days, decimals use `.`, and a missing value is either
//! an empty field or `NaN`.

use std::path::Path;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::numcore::{Matrix, Rng};

pub const CSV_HEADER: [&str; 7] = [
    "date",
    "open",
    "high",
    "low",
    "close",
    "adj_close",
    "volume",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Open,
    High,
    Low,
    Close,
    AdjClose,
    Volume,
}

impl Feature {
    pub const ALL: [Feature; 6] = [
        Feature::Open,
        Feature::High,
        Feature::Low,
        Feature::Close,
        Feature::AdjClose,
        Feature::Volume,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Open => "open",
            Feature::High => "high",
            Feature::Low => "low",
            Feature::Close => "close",
            Feature::AdjClose => "adj_close",
            Feature::Volume => "volume",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OhlcvRow {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub adj_close: f64,
    pub volume: f64,
}

impl OhlcvRow {
    pub fn get(&self, f: Feature) -> f64 {
        match f {
            Feature::Open => self.open,
            Feature::High => self.high,
            Feature::Low => self.low,
            Feature::Close => self.close,
            Feature::AdjClose => self.adj_close,
            Feature::Volume => self.volume,
        }
    }

    fn values(&self) -> [f64; 6] {
        [
            self.open,
            self.high,
            self.low,
            self.close,
            self.adj_close,
            self.volume,
        ]
    }

    fn is_complete(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OhlcvSeries {
    pub rows: Vec<OhlcvRow>,
}

impl OhlcvSeries {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, f: Feature) -> Vec<f64> {
        self.rows.iter().map(|r| r.get(f)).collect()
    }

    /// Rows as a `len × features.len()` matrix.
    pub fn feature_matrix(&self, features: &[Feature]) -> Result<Matrix> {
        let data = self
            .rows
            .iter()
            .flat_map(|r| features.iter().map(|&f| r.get(f)))
            .collect();
        Matrix::from_vec(self.rows.len(), features.len(), data)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            let mut rec = vec![r.date.format("%Y-%m-%d").to_string()];
            rec.extend(r.values().iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn parse_value(field: &str, line: u64, name: &str) -> Result<f64> {
    let t = field.trim();
    if t.is_empty() || t == "NaN" {
        return Ok(f64::NAN);
    }
    t.parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("{name} value {t:?} is not a number"),
    })
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<OhlcvSeries> {
    let file = std::fs::File::open(path)?;
    read_csv(file)
}

/// Parses the documented schema from any reader; rows are returned in date
/// order.
pub fn read_csv(reader: impl std::io::Read) -> Result<OhlcvSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().map(str::trim).ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "header must be {:?}, got {:?}",
                CSV_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != CSV_HEADER.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", CSV_HEADER.len(), rec.len()),
            });
        }
        let date =
            NaiveDate::parse_from_str(rec[0].trim(), "%Y-%m-%d").map_err(|e| Error::Parse {
                line,
                message: format!("bad date {:?}: {e}", &rec[0]),
            })?;
        let v: Vec<f64> = (1..7)
            .map(|i| parse_value(&rec[i], line, CSV_HEADER[i]))
            .collect::<Result<_>>()?;
        rows.push(OhlcvRow {
            date,
            open: v[0],
            high: v[1],
            low: v[2],
            close: v[3],
            adj_close: v[4],
            volume: v[5],
        });
    }
    if rows.is_empty() {
        return Err(Error::Integrity("no rows".into()));
    }
    rows.sort_by_key(|r| r.date);
    if let Some(w) = rows.windows(2).find(|w| w[0].date == w[1].date) {
        return Err(Error::Integrity(format!("duplicate date {}", w[0].date)));
    }
    Ok(OhlcvSeries { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanReport {
    pub kept: usize,
    pub dropped: usize,
}

/// Drops every row with a missing or non-finite field.
pub fn clean(series: &OhlcvSeries) -> Result<(OhlcvSeries, CleanReport)> {
    let rows: Vec<OhlcvRow> = series
        .rows
        .iter()
        .filter(|r| r.is_complete())
        .cloned()
        .collect();
    let dropped = series.rows.len() - rows.len();
    if rows.is_empty() {
        return Err(Error::Integrity(format!(
            "all {dropped} rows had missing values"
        )));
    }
    if let Some(r) = rows.iter().find(|r| r.volume < 0.0) {
        return Err(Error::Integrity(format!("negative volume on {}", r.date)));
    }
    let kept = rows.len();
    Ok((OhlcvSeries { rows }, CleanReport { kept, dropped }))
}

/// Per-column min/max fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub features: Vec<Feature>,
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(features: &[Feature], train: &Matrix) -> Result<Self> {
        if train.cols() != features.len() {
            return Err(input_err(format!(
                "{} feature names for {} columns",
                features.len(),
                train.cols()
            )));
        }
        let mut mins = vec![f64::INFINITY; train.cols()];
        let mut maxs = vec![f64::NEG_INFINITY; train.cols()];
        for r in 0..train.rows() {
            for (c, &v) in train.row(r).iter().enumerate() {
                mins[c] = mins[c].min(v);
                maxs[c] = maxs[c].max(v);
            }
        }
        Ok(Self {
            features: features.to_vec(),
            mins,
            maxs,
        })
    }

    fn scale(&self, col: usize, v: f64) -> f64 {
        let (lo, hi) = (self.mins[col], self.maxs[col]);
        if hi == lo {
            0.5
        } else {
            (v - lo) / (hi - lo)
        }
    }

    fn unscale(&self, col: usize, v: f64) -> f64 {
        let (lo, hi) = (self.mins[col], self.maxs[col]);
        if hi == lo {
            lo
        } else {
            v * (hi - lo) + lo
        }
    }

    pub fn transform(&self, m: &Matrix) -> Result<Matrix> {
        if m.cols() != self.mins.len() {
            return Err(input_err(format!(
                "scaler fitted on {} columns, got {}",
                self.mins.len(),
                m.cols()
            )));
        }
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = self.scale(c, *v);
            }
        }
        Ok(out)
    }

    pub fn column_of(&self, feature: Feature) -> Result<usize> {
        self.features
            .iter()
            .position(|&f| f == feature)
            .ok_or_else(|| input_err(format!("scaler was not fitted on {}", feature.name())))
    }

    /// Maps scaled values of `feature` back to original units.
    pub fn inverse(&self, values: &[f64], feature: Feature) -> Result<Vec<f64>> {
        let col = self.column_of(feature)?;
        Ok(values.iter().map(|&v| self.unscale(col, v)).collect())
    }

    pub fn inverse_one(&self, value: f64, feature: Feature) -> Result<f64> {
        Ok(self.unscale(self.column_of(feature)?, value))
    }

    pub fn range(&self, feature: Feature) -> Result<(f64, f64)> {
        let c = self.column_of(feature)?;
        Ok((self.mins[c], self.maxs[c]))
    }
}

/// Fits on `train` and scales `apply`. A constant training column maps to 0.5.
pub fn scaler_fit_transform(
    features: &[Feature],
    train: &Matrix,
    apply: &Matrix,
) -> Result<(Matrix, MinMaxScaler)> {
    let scaler = MinMaxScaler::fit(features, train)?;
    Ok((scaler.transform(apply)?, scaler))
}

pub fn scaler_inverse(scaler: &MinMaxScaler, values: &[f64], feature: Feature) -> Result<Vec<f64>> {
    scaler.inverse(values, feature)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    /// `lookback × features` windows.
    pub inputs: Vec<Matrix>,
    pub targets: Vec<f64>,
    pub lookback: usize,
    pub horizon: usize,
    /// Index of the first sample in the unsplit dataset; sample `i` covers
    /// rows `[first_sample + i, first_sample + i + lookback)`.
    pub first_sample: usize,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Row of the series holding the target of sample `i`.
    pub fn target_row(&self, i: usize) -> usize {
        self.first_sample + i + self.lookback + self.horizon - 1
    }

    /// Windows flattened row-major, the layout a KAN consumes.
    pub fn flat_inputs(&self) -> Vec<Vec<f64>> {
        self.inputs.iter().map(|m| m.data().to_vec()).collect()
    }
}

pub fn sample_count(rows: usize, lookback: usize, horizon: usize) -> usize {
    (rows + 1).saturating_sub(lookback + horizon)
}

/// Sample `i` has input rows `[i, i + L)` and target `series[i + L + H - 1, target_col]`.
pub fn make_windows(
    scaled: &Matrix,
    target_col: usize,
    lookback: usize,
    horizon: usize,
) -> Result<WindowedDataset> {
    if lookback == 0 || horizon == 0 {
        return Err(input_err("lookback and horizon must be at least 1"));
    }
    if target_col >= scaled.cols() {
        return Err(input_err(format!(
            "target column {target_col} out of {} columns",
            scaled.cols()
        )));
    }
    let need = lookback + horizon;
    if scaled.rows() < need {
        return Err(input_err(format!(
            "series of {} rows is too short: lookback {lookback} + horizon {horizon} needs at least {need}",
            scaled.rows()
        )));
    }
    let count = sample_count(scaled.rows(), lookback, horizon);
    let cols = scaled.cols();
    let mut inputs = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    for i in 0..count {
        let data = scaled.data()[i * cols..(i + lookback) * cols].to_vec();
        inputs.push(Matrix::from_vec(lookback, cols, data)?);
        targets.push(scaled.get(i + lookback + horizon - 1, target_col));
    }
    Ok(WindowedDataset {
        inputs,
        targets,
        lookback,
        horizon,
        first_sample: 0,
    })
}

pub fn train_count(samples: usize, train_frac: f64) -> Result<usize> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(input_err(format!(
            "train fraction must lie in (0, 1), got {train_frac}"
        )));
    }
    let n = (train_frac * samples as f64).floor() as usize;
    if n == 0 || n == samples {
        return Err(input_err(format!(
            "splitting {samples} samples at {train_frac} leaves an empty side"
        )));
    }
    Ok(n)
}

/// First `floor(train_frac · count)` samples train, the rest test. Never shuffles.
pub fn chrono_split(
    dataset: &WindowedDataset,
    train_frac: f64,
) -> Result<(WindowedDataset, WindowedDataset)> {
    let n = train_count(dataset.len(), train_frac)?;
    let part = |lo: usize, hi: usize| WindowedDataset {
        inputs: dataset.inputs[lo..hi].to_vec(),
        targets: dataset.targets[lo..hi].to_vec(),
        lookback: dataset.lookback,
        horizon: dataset.horizon,
        first_sample: dataset.first_sample + lo,
    };
    Ok((part(0, n), part(n, dataset.len())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeKind {
    Normal,
    Volatile,
    Trending,
}

impl RegimeKind {
    pub const ALL: [RegimeKind; 3] = [
        RegimeKind::Normal,
        RegimeKind::Volatile,
        RegimeKind::Trending,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegimeKind::Normal => "normal",
            RegimeKind::Volatile => "volatile",
            RegimeKind::Trending => "trending",
        }
    }

    /// Default daily (drift, volatility).
    pub fn defaults(self) -> (f64, f64) {
        match self {
            RegimeKind::Normal => (0.0003, 0.01),
            RegimeKind::Volatile => (0.0003, 0.03),
            RegimeKind::Trending => (0.002, 0.01),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketRegime {
    pub kind: RegimeKind,
    pub mu: f64,
    pub sigma: f64,
    pub length: usize,
    pub seed: u64,
}

impl MarketRegime {
    pub fn new(kind: RegimeKind, length: usize, seed: u64) -> Self {
        let (mu, sigma) = kind.defaults();
        Self {
            kind,
            mu,
            sigma,
            length,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) || !self.mu.is_finite() {
            return Err(input_err(format!(
                "regime needs finite mu and sigma > 0, got mu={} sigma={}",
                self.mu, self.sigma
            )));
        }
        if self.length == 0 {
            return Err(input_err("regime length must be positive"));
        }
        Ok(())
    }

    /// Length check against the windowing the series will feed.
    pub fn validate_for(&self, lookback: usize, horizon: usize) -> Result<()> {
        self.validate()?;
        if self.length < lookback + horizon + 10 {
            return Err(input_err(format!(
                "regime length {} is shorter than lookback + horizon + 10 = {}",
                self.length,
                lookback + horizon + 10
            )));
        }
        Ok(())
    }
}

pub const SYNTHETIC_START_PRICE: f64 = 100.0;
pub const SYNTHETIC_BASE_VOLUME: f64 = 1.0e6;

/// Geometric Brownian motion close path with derived open/high/low/volume.
///
/// Per day `t`, in draw order: `z, u, v, w, n ~ N(0, 1)`.
///
/// * `close_t = close_{t-1} · exp((μ − σ²/2) + σ·z)`, `close_0 = 100`
/// * `open_t = close_{t-1} · exp(σ/4 · u)` (`close_{-1} = close_0`)
/// * `high_t = max(open_t, close_t) · exp(σ/2 · |v|)`
/// * `low_t = min(open_t, close_t) · exp(−σ/2 · |w|)`
/// * `adj_close_t = close_t`
/// * `volume_t = 10⁶ · exp(0.25 · n)`
///
/// Dates run daily from 2015-01-02.
pub fn gen_synthetic(regime: &MarketRegime) -> Result<OhlcvSeries> {
    regime.validate()?;
    let mut rng = Rng::new(regime.seed);
    let start = NaiveDate::from_ymd_opt(2015, 1, 2).expect("valid date");
    let (mu, sigma) = (regime.mu, regime.sigma);
    let mut rows = Vec::with_capacity(regime.length);
    let mut prev_close = SYNTHETIC_START_PRICE;
    for t in 0..regime.length {
        let z = rng.standard_normal();
        let u = rng.standard_normal();
        let v = rng.standard_normal();
        let w = rng.standard_normal();
        let n = rng.standard_normal();
        let close = if t == 0 {
            SYNTHETIC_START_PRICE
        } else {
            prev_close * ((mu - 0.5 * sigma * sigma) + sigma * z).exp()
        };
        let open = prev_close * (0.25 * sigma * u).exp();
        let high = open.max(close) * (0.5 * sigma * v.abs()).exp();
        let low = open.min(close) * (-0.5 * sigma * w.abs()).exp();
        rows.push(OhlcvRow {
            date: start + Duration::days(t as i64),
            open,
            high,
            low,
            close,
            adj_close: close,
            volume: SYNTHETIC_BASE_VOLUME * (0.25 * n).exp(),
        });
        prev_close = close;
    }
    Ok(OhlcvSeries { rows })
}
