//! Config-driven experiment runner and comparison reports.
//!
//! An experiment prepares one series, trains one model on one-step-ahead
//! windows, scores it on the chronological test split, and then scores
//! iterative forecasts at each requested horizon. Matrices of experiments
//! run in parallel and are merged in config order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bspline::SplineSpec;
use crate::data::{
    chrono_split, clean, gen_synthetic, load_csv, make_windows, sample_count, train_count, Feature,
    MarketRegime, MinMaxScaler, OhlcvSeries, RegimeKind, WindowedDataset,
};
use crate::error::{input_err, Error, Result};
use crate::forecast::{iterative_forecast, overwrite_columns, Checkpoint, ForecastTrace, Model};
use crate::kan::kan_init_with_specs;
use crate::lstm::lstm_init;
use crate::metrics::evaluate;
use crate::numcore::{Activation, Matrix, Rng};
use crate::optim::{TrainConfig, TrainReport};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

/// Widest default KAN hidden layer.
pub const MAX_DEFAULT_WIDTH: usize = 64;

/// Spline domain of KAN layers after the first; inputs to the first layer
/// are min-max scaled and use `[0, 1]`.
pub const HIDDEN_DOMAIN: (f64, f64) = (-1.0, 1.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelConfig {
    Lstm {
        layers: usize,
        units: usize,
        #[serde(default = "default_head")]
        head_activation: Activation,
    },
    Kan {
        grid: usize,
        k: usize,
        /// Hidden widths; defaults to one layer of `min(2n + 1, 64)` for
        /// `n` inputs.
        #[serde(default)]
        hidden: Option<Vec<usize>>,
    },
}

fn default_head() -> Activation {
    Activation::Linear
}

impl ModelConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelConfig::Lstm { .. } => "lstm",
            ModelConfig::Kan { .. } => "kan",
        }
    }

    pub fn label(&self) -> String {
        match self {
            ModelConfig::Lstm {
                layers,
                units,
                head_activation,
            } => format!(
                "lstm(layers={layers};units={units};head={})",
                activation_name(*head_activation)
            ),
            ModelConfig::Kan { grid, k, hidden } => match hidden {
                Some(h) => format!(
                    "kan(grid={grid};k={k};hidden={})",
                    h.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
                ),
                None => format!("kan(grid={grid};k={k})"),
            },
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Lstm {
                layers,
                units,
                head_activation,
            } => {
                if *layers == 0 || *units == 0 {
                    return Err(Error::Config(
                        "lstm layers and units must be positive".into(),
                    ));
                }
                if !matches!(head_activation, Activation::Linear | Activation::Tanh) {
                    return Err(Error::Config(
                        "lstm head_activation must be linear or tanh".into(),
                    ));
                }
            }
            ModelConfig::Kan { grid, k, hidden } => {
                SplineSpec::new(*grid, *k, 0.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
                if hidden.as_ref().is_some_and(|h| h.contains(&0)) {
                    return Err(Error::Config("kan hidden widths must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Fresh model for windows of `lookback × features`.
    pub fn build(&self, lookback: usize, features: usize, rng: &mut Rng) -> Result<Model> {
        match self {
            ModelConfig::Lstm {
                layers,
                units,
                head_activation,
            } => Ok(Model::Lstm(lstm_init(
                &vec![*units; *layers],
                features,
                *head_activation,
                rng,
            )?)),
            ModelConfig::Kan { grid, k, hidden } => {
                let n = lookback * features;
                let hidden = hidden
                    .clone()
                    .unwrap_or_else(|| vec![(2 * n + 1).min(MAX_DEFAULT_WIDTH)]);
                let mut dims = vec![n];
                dims.extend(hidden);
                dims.push(1);
                let first = SplineSpec::new(*grid, *k, 0.0, 1.0)?;
                let rest = SplineSpec::new(*grid, *k, HIDDEN_DOMAIN.0, HIDDEN_DOMAIN.1)?;
                let specs: Vec<SplineSpec> = (0..dims.len() - 1)
                    .map(|i| if i == 0 { first } else { rest })
                    .collect();
                Ok(Model::Kan(kan_init_with_specs(&dims, &specs, rng)?))
            }
        }
    }

    /// Adam (lr 0.01, batch 32, 100 epochs) for LSTMs, 100 full-batch L-BFGS
    /// iterations for KANs.
    pub fn default_train(&self) -> TrainConfig {
        match self {
            ModelConfig::Lstm { .. } => TrainConfig {
                batch_size: Some(32),
                ..TrainConfig::adam(0.01, 100)
            },
            ModelConfig::Kan { .. } => TrainConfig::lbfgs(100),
        }
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Sigmoid => "sigmoid",
        Activation::Tanh => "tanh",
        Activation::Silu => "silu",
        Activation::Linear => "linear",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        regime: RegimeKind,
        days: usize,
        #[serde(default)]
        mu: Option<f64>,
        #[serde(default)]
        sigma: Option<f64>,
        seed: u64,
    },
    Csv {
        path: PathBuf,
    },
}

impl DataConfig {
    pub fn regime_name(&self) -> &'static str {
        match self {
            DataConfig::Synthetic { regime, .. } => regime.name(),
            DataConfig::Csv { .. } => "csv",
        }
    }

    pub fn market_regime(&self) -> Option<MarketRegime> {
        match self {
            DataConfig::Synthetic {
                regime,
                days,
                mu,
                sigma,
                seed,
            } => {
                let mut r = MarketRegime::new(*regime, *days, *seed);
                if let Some(m) = mu {
                    r.mu = *m;
                }
                if let Some(s) = sigma {
                    r.sigma = *s;
                }
                Some(r)
            }
            DataConfig::Csv { .. } => None,
        }
    }

    pub fn load(&self) -> Result<OhlcvSeries> {
        match self {
            DataConfig::Synthetic { .. } => {
                gen_synthetic(&self.market_regime().expect("synthetic"))
            }
            DataConfig::Csv { path } => load_csv(path),
        }
    }
}

/// How windows are fed forward during iterative forecasting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// All six columns; non-target columns are copied forward.
    CopyForward,
    /// Only the target column.
    CloseOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default = "default_lookback")]
    pub lookback: usize,
    /// Target offset used for training windows; iterative forecasts
    /// require 1.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default = "default_feature_mode")]
    pub feature_mode: FeatureMode,
    #[serde(default = "default_target")]
    pub target: Feature,
    #[serde(default)]
    pub forecast_horizons: Vec<usize>,
    /// Upper bound on forecast origins scored per horizon.
    #[serde(default = "default_max_origins")]
    pub max_origins: usize,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub seed: u64,
}

fn default_lookback() -> usize {
    20
}
fn default_horizon() -> usize {
    1
}
fn default_train_frac() -> f64 {
    0.8
}
fn default_feature_mode() -> FeatureMode {
    FeatureMode::CopyForward
}
fn default_target() -> Feature {
    Feature::Close
}
fn default_max_origins() -> usize {
    50
}

impl ExperimentConfig {
    pub fn new(model: ModelConfig, data: DataConfig) -> Self {
        Self {
            name: None,
            model,
            data,
            lookback: default_lookback(),
            horizon: default_horizon(),
            train_frac: default_train_frac(),
            feature_mode: default_feature_mode(),
            target: default_target(),
            forecast_horizons: Vec::new(),
            max_origins: default_max_origins(),
            train: None,
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.model.label())
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train
            .clone()
            .unwrap_or_else(|| self.model.default_train())
    }

    pub fn features(&self) -> Vec<Feature> {
        match self.feature_mode {
            FeatureMode::CopyForward => Feature::ALL.to_vec(),
            FeatureMode::CloseOnly => vec![self.target],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        if self.lookback == 0 || self.horizon == 0 {
            return bad("lookback and horizon must be at least 1".into());
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return bad(format!(
                "train_frac must lie in (0, 1), got {}",
                self.train_frac
            ));
        }
        if !matches!(self.target, Feature::Close | Feature::AdjClose) {
            return bad(format!(
                "target must be close or adj_close, got {}",
                self.target.name()
            ));
        }
        if self.forecast_horizons.contains(&0) {
            return bad("forecast horizons must be at least 1".into());
        }
        if !self.forecast_horizons.is_empty() && self.horizon != 1 {
            return bad("iterative forecast horizons need one-step training (horizon = 1)".into());
        }
        if self.max_origins == 0 {
            return bad("max_origins must be at least 1".into());
        }
        if let Some(r) = self.data.market_regime() {
            r.validate_for(self.lookback, self.horizon)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.train_config().batch_size == Some(0) {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// Everything derived from the raw series before training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub features: Vec<Feature>,
    pub scaler: MinMaxScaler,
    pub scaled: Matrix,
    pub train: WindowedDataset,
    pub test: WindowedDataset,
    pub dropped_rows: usize,
}

/// Cleans, scales on the training rows only, windows and splits.
pub fn prepare(series: &OhlcvSeries, config: &ExperimentConfig) -> Result<Prepared> {
    let (series, report) = clean(series)?;
    let features = config.features();
    let all = series.feature_matrix(&features)?;
    let (l, h) = (config.lookback, config.horizon);
    if all.rows() < l + h {
        return Err(input_err(format!(
            "series of {} rows is too short: lookback {l} + horizon {h} needs at least {}",
            all.rows(),
            l + h
        )));
    }
    let n_train = train_count(sample_count(all.rows(), l, h), config.train_frac)?;
    let train_rows = n_train + l + h - 1;
    let fit = Matrix::from_vec(
        train_rows,
        all.cols(),
        all.data()[..train_rows * all.cols()].to_vec(),
    )?;
    let scaler = MinMaxScaler::fit(&features, &fit)?;
    let scaled = scaler.transform(&all)?;
    let target_col = scaler.column_of(config.target)?;
    let ds = make_windows(&scaled, target_col, l, h)?;
    let (train, test) = chrono_split(&ds, config.train_frac)?;
    Ok(Prepared {
        features,
        scaler,
        scaled,
        train,
        test,
        dropped_rows: report.dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSummary {
    pub horizon: usize,
    /// Number of test origins scored.
    pub origins: usize,
    /// RMSE over every step of every scored trace, scaled units.
    pub rmse: Option<f64>,
    pub rmse_price: Option<f64>,
    /// `ok`, `unavailable: …` or `failed: …`.
    pub status: String,
    /// Trace from the first scored origin.
    pub trace: Option<ForecastTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub version: String,
    pub label: String,
    pub model: String,
    pub regime: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub failure: Option<String>,
    pub dropped_rows: usize,
    pub param_count: usize,
    pub epochs: usize,
    pub converged: bool,
    pub stalled: bool,
    pub train_rmse: Option<f64>,
    pub test_rmse: Option<f64>,
    pub test_rmse_price: Option<f64>,
    pub wall_seconds: f64,
    pub horizons: Vec<HorizonSummary>,
}

impl ExperimentResult {
    fn failed(config: &ExperimentConfig, message: String) -> Self {
        Self {
            version: VERSION.to_string(),
            label: config.label(),
            model: config.model.kind().to_string(),
            regime: config.data.regime_name().to_string(),
            seed: config.seed,
            config: config.clone(),
            failure: Some(message),
            dropped_rows: 0,
            param_count: 0,
            epochs: 0,
            converged: false,
            stalled: false,
            train_rmse: None,
            test_rmse: None,
            test_rmse_price: None,
            wall_seconds: 0.0,
            horizons: Vec::new(),
        }
    }

    pub fn horizon(&self, h: usize) -> Option<&HorizonSummary> {
        self.horizons.iter().find(|s| s.horizon == h)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Serialization without wall-clock timing; identical for identical
    /// config and seed.
    pub fn canonical_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(o) = v.as_object_mut() {
            o.remove("wall_seconds");
        }
        Ok(serde_json::to_string(&v)?)
    }
}

/// Evenly spaced origins in `[lo, hi]`, at most `max`.
fn spread(lo: usize, hi: usize, max: usize) -> Vec<usize> {
    let n = hi - lo + 1;
    if n <= max {
        return (lo..=hi).collect();
    }
    if max == 1 {
        return vec![lo];
    }
    (0..max).map(|i| lo + i * (n - 1) / (max - 1)).collect()
}

fn window_at(scaled: &Matrix, start: usize, lookback: usize) -> Result<Matrix> {
    let c = scaled.cols();
    Matrix::from_vec(
        lookback,
        c,
        scaled.data()[start * c..(start + lookback) * c].to_vec(),
    )
}

/// Scores iterative forecasts of length `h` seeded from test windows.
pub fn score_horizon(
    model: &Model,
    prep: &Prepared,
    config: &ExperimentConfig,
    h: usize,
) -> HorizonSummary {
    let l = config.lookback;
    let rows = prep.scaled.rows();
    let target_col = prep.scaler.column_of(config.target).expect("target fitted");
    let overwrite = overwrite_columns(&prep.features);
    let first = prep.test.first_sample;
    let mut summary = HorizonSummary {
        horizon: h,
        origins: 0,
        rmse: None,
        rmse_price: None,
        status: String::new(),
        trace: None,
    };
    if first + l + h > rows {
        summary.status = format!(
            "unavailable: test region has {} rows after the first window, horizon needs {h}",
            rows - first - l
        );
        return summary;
    }
    let origins = spread(first, rows - l - h, config.max_origins);
    let mut actual = Vec::new();
    let mut predicted = Vec::new();
    for &o in &origins {
        let run = window_at(&prep.scaled, o, l)
            .and_then(|w| iterative_forecast(model, &w, h, &overwrite));
        let trace = match run {
            Ok(t) => t,
            Err(e) => {
                summary.status = format!("failed: origin {o}: {e}");
                return summary;
            }
        };
        let truth: Vec<f64> = (o + l..o + l + h)
            .map(|r| prep.scaled.get(r, target_col))
            .collect();
        actual.extend_from_slice(&truth);
        predicted.extend_from_slice(&trace.predictions);
        if summary.trace.is_none() {
            summary.trace = trace.with_actual(truth).ok();
        }
    }
    match evaluate(&actual, &predicted, &prep.scaler, config.target, 0.0) {
        Ok(r) => {
            summary.origins = origins.len();
            summary.rmse = Some(r.rmse);
            summary.rmse_price = r.rmse_price;
            summary.status = "ok".into();
        }
        Err(e) => summary.status = format!("failed: {e}"),
    }
    summary
}

/// Trained model and scaler state of one experiment.
pub struct TrainedExperiment {
    pub model: Model,
    pub prepared: Prepared,
    pub report: TrainReport,
}

impl TrainedExperiment {
    pub fn checkpoint(&self, config: &ExperimentConfig) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            scaler: self.prepared.scaler.clone(),
            target: config.target,
            lookback: config.lookback,
            overwrite: overwrite_columns(&self.prepared.features),
            history: self.prepared.scaled.clone(),
            train_report: TrainReport {
                final_params: Vec::new(),
                ..self.report.clone()
            },
        }
    }
}

/// Data preparation and training only.
pub fn train_experiment(config: &ExperimentConfig) -> Result<TrainedExperiment> {
    config.validate()?;
    let series = config.data.load()?;
    let prepared = prepare(&series, config)?;
    let mut rng = Rng::new(config.seed);
    let mut model = config
        .model
        .build(config.lookback, prepared.features.len(), &mut rng)?;
    let mut tc = config.train_config();
    if tc.shuffle_seed == 0 {
        tc.shuffle_seed = config.seed;
    }
    let report = model.fit(&prepared.train, &tc)?;
    Ok(TrainedExperiment {
        model,
        prepared,
        report,
    })
}

/// Runs one experiment. Invalid configs and unreadable data are errors;
/// failures during training or evaluation are recorded in the result.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let series = config.data.load()?;
    let prepared = match prepare(&series, config) {
        Ok(p) => p,
        Err(e) => {
            return Ok(ExperimentResult::failed(
                config,
                format!("data preparation: {e}"),
            ))
        }
    };
    let mut result = ExperimentResult::failed(config, String::new());
    result.failure = None;
    result.dropped_rows = prepared.dropped_rows;

    let mut rng = Rng::new(config.seed);
    let mut model = config
        .model
        .build(config.lookback, prepared.features.len(), &mut rng)?;
    result.param_count = model.param_count();
    let mut tc = config.train_config();
    if tc.shuffle_seed == 0 {
        tc.shuffle_seed = config.seed;
    }
    let started = Instant::now();
    let report = model.fit(&prepared.train, &tc);
    result.wall_seconds = started.elapsed().as_secs_f64();
    let report = match report {
        Ok(r) => r,
        Err(e) => {
            result.failure = Some(format!("training: {e}"));
            return Ok(result);
        }
    };
    result.epochs = report.epochs;
    result.converged = report.converged;
    result.stalled = report.stalled;
    result.train_rmse = Some(report.final_rmse);

    let scored = model.predict_all(&prepared.test).and_then(|p| {
        evaluate(
            &prepared.test.targets,
            &p,
            &prepared.scaler,
            config.target,
            result.wall_seconds,
        )
    });
    match scored {
        Ok(r) => {
            result.test_rmse = Some(r.rmse);
            result.test_rmse_price = r.rmse_price;
        }
        Err(e) => {
            result.failure = Some(format!("evaluation: {e}"));
            return Ok(result);
        }
    }
    result.horizons = config
        .forecast_horizons
        .iter()
        .map(|&h| score_horizon(&model, &prepared, config, h))
        .collect();
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    /// One table row per result and horizon.
    All,
    /// Only the lowest test RMSE per (model, regime, horizon). Selecting on
    /// test RMSE is optimistic.
    Best,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    pub experiments: Vec<ExperimentConfig>,
    /// When set, every experiment is repeated once per seed.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default = "default_aggregate")]
    pub aggregate: Aggregate,
}

fn default_aggregate() -> Aggregate {
    Aggregate::All
}

impl MatrixConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if m.experiments.is_empty() {
            return Err(Error::Config("matrix has no experiments".into()));
        }
        if m.seeds.as_ref().is_some_and(Vec::is_empty) {
            return Err(Error::Config("seeds list is empty".into()));
        }
        for e in &m.experiments {
            e.validate()?;
        }
        Ok(m)
    }

    /// Experiments after seed expansion, in run order.
    pub fn expand(&self) -> Vec<ExperimentConfig> {
        match &self.seeds {
            None => self.experiments.clone(),
            Some(seeds) => self
                .experiments
                .iter()
                .flat_map(|e| {
                    seeds.iter().map(move |&s| ExperimentConfig {
                        seed: s,
                        ..e.clone()
                    })
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub config: String,
    pub regime: String,
    pub horizon: usize,
    pub train_rmse: Option<f64>,
    pub test_rmse: Option<f64>,
    pub wall_seconds: f64,
    /// Best KAN over best LSTM test RMSE in this (regime, horizon) cell.
    pub ratio: Option<f64>,
    /// Index into the result list.
    pub result: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeSummary {
    pub model: String,
    pub runs: usize,
    pub mean_wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixOutput {
    pub version: String,
    pub aggregate: Aggregate,
    pub results: Vec<ExperimentResult>,
    pub table: Vec<TableRow>,
    pub runtime: Vec<RuntimeSummary>,
}

impl MatrixOutput {
    pub fn from_results(results: Vec<ExperimentResult>, aggregate: Aggregate) -> Self {
        let table = comparison_table(&results, aggregate);
        let runtime = runtime_summary(&results);
        Self {
            version: VERSION.to_string(),
            aggregate,
            results,
            table,
            runtime,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Results without timing, for comparing runs.
    pub fn canonical_json(&self) -> Result<String> {
        let parts: Vec<String> = self
            .results
            .iter()
            .map(|r| r.canonical_json())
            .collect::<Result<_>>()?;
        Ok(format!("[{}]", parts.join(",")))
    }
}

/// Runs every config on a pool of `parallelism` threads; output order
/// follows input order.
pub fn run_matrix(
    configs: &[ExperimentConfig],
    parallelism: usize,
) -> Result<Vec<ExperimentResult>> {
    if configs.is_empty() {
        return Err(input_err("matrix has no experiments"));
    }
    for c in configs {
        c.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        configs
            .par_iter()
            .map(|c| {
                run_experiment(c).unwrap_or_else(|e| ExperimentResult::failed(c, e.to_string()))
            })
            .collect()
    }))
}

/// Rows per (result, horizon). Results without forecast horizons
/// contribute one row at the training horizon scored on the test split.
pub fn comparison_table(results: &[ExperimentResult], aggregate: Aggregate) -> Vec<TableRow> {
    let mut rows = Vec::new();
    for (i, r) in results.iter().enumerate() {
        let base = TableRow {
            model: r.model.clone(),
            config: r.label.clone(),
            regime: r.regime.clone(),
            horizon: r.config.horizon,
            train_rmse: r.train_rmse,
            test_rmse: r.test_rmse,
            wall_seconds: r.wall_seconds,
            ratio: None,
            result: i,
        };
        if r.config.forecast_horizons.is_empty() {
            rows.push(base);
        } else {
            for &h in &r.config.forecast_horizons {
                rows.push(TableRow {
                    horizon: h,
                    test_rmse: r.horizon(h).and_then(|s| s.rmse),
                    ..base.clone()
                });
            }
        }
    }

    if aggregate == Aggregate::Best {
        let mut best: BTreeMap<(String, String, usize), TableRow> = BTreeMap::new();
        let mut order = Vec::new();
        for row in rows {
            let key = (row.model.clone(), row.regime.clone(), row.horizon);
            match best.get(&key) {
                None => {
                    order.push(key.clone());
                    best.insert(key, row);
                }
                Some(cur) if better(row.test_rmse, cur.test_rmse) => {
                    best.insert(key, row);
                }
                Some(_) => {}
            }
        }
        rows = order
            .into_iter()
            .map(|k| best.remove(&k).expect("key present"))
            .collect();
    }

    let mut cells: BTreeMap<(String, usize), (Option<f64>, Option<f64>)> = BTreeMap::new();
    for row in &rows {
        let cell = cells.entry((row.regime.clone(), row.horizon)).or_default();
        let slot = match row.model.as_str() {
            "kan" => &mut cell.0,
            _ => &mut cell.1,
        };
        if better(row.test_rmse, *slot) {
            *slot = row.test_rmse;
        }
    }
    for row in &mut rows {
        if let Some((Some(kan), Some(lstm))) = cells.get(&(row.regime.clone(), row.horizon)) {
            if *lstm > 0.0 {
                row.ratio = Some(kan / lstm);
            }
        }
    }
    rows
}

fn better(candidate: Option<f64>, current: Option<f64>) -> bool {
    match (candidate, current) {
        (Some(a), Some(b)) => a < b,
        (Some(a), None) => a.is_finite(),
        _ => false,
    }
}

/// Mean training wall-clock per model family, over runs that trained.
pub fn runtime_summary(results: &[ExperimentResult]) -> Vec<RuntimeSummary> {
    let mut acc: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for r in results.iter().filter(|r| r.train_rmse.is_some()) {
        let e = acc.entry(r.model.clone()).or_default();
        e.0 += 1;
        e.1 += r.wall_seconds;
    }
    acc.into_iter()
        .map(|(model, (runs, total))| RuntimeSummary {
            model,
            runs,
            mean_wall_seconds: total / runs as f64,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Markdown,
    Gnuplot,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            "gnuplot" => Ok(Self::Gnuplot),
            other => Err(input_err(format!(
                "unknown report format {other:?}; expected csv, markdown or gnuplot"
            ))),
        }
    }
}

pub const CSV_REPORT_HEADER: &str =
    "model,config,regime,horizon,train_rmse,test_rmse,wall_seconds,ratio";

fn fmt4(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

pub fn render_csv(out: &MatrixOutput) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(CSV_REPORT_HEADER.split(','))?;
    for r in &out.table {
        w.write_record([
            r.model.clone(),
            r.config.clone(),
            r.regime.clone(),
            r.horizon.to_string(),
            fmt4(r.train_rmse),
            fmt4(r.test_rmse),
            format!("{:.4}", r.wall_seconds),
            fmt4(r.ratio),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn render_markdown(out: &MatrixOutput) -> String {
    let mut s = String::new();
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "N/A".into());
    s.push_str(
        "| Model | Config | Regime | Horizon | Train RMSE | Test RMSE | Wall (s) | KAN/LSTM |\n",
    );
    s.push_str("|---|---|---|---:|---:|---:|---:|---:|\n");
    for r in &out.table {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {:.4} | {} |",
            r.model,
            r.config,
            r.regime,
            r.horizon,
            cell(r.train_rmse),
            cell(r.test_rmse),
            r.wall_seconds,
            r.ratio.map(|x| format!("{x:.4}")).unwrap_or_default()
        );
    }
    s.push_str("\n| Model | Runs | Mean training time (s) |\n|---|---:|---:|\n");
    for r in &out.runtime {
        let _ = writeln!(
            s,
            "| {} | {} | {:.4} |",
            r.model, r.runs, r.mean_wall_seconds
        );
    }
    let failures: Vec<&ExperimentResult> =
        out.results.iter().filter(|r| r.failure.is_some()).collect();
    if !failures.is_empty() {
        s.push_str("\nFailures:\n\n");
        for r in failures {
            let _ = writeln!(
                s,
                "- {} / {} / seed {}: {}",
                r.label,
                r.regime,
                r.seed,
                r.failure.as_deref().unwrap_or("")
            );
        }
    }
    s
}

pub fn render_runtime_csv(out: &MatrixOutput) -> String {
    let mut s = String::from("model,runs,mean_wall_seconds\n");
    for r in &out.runtime {
        let _ = writeln!(s, "{},{},{:.4}", r.model, r.runs, r.mean_wall_seconds);
    }
    s
}

/// Gnuplot data for one trace: `step actual predicted`, whitespace
/// separated, `NaN` where ground truth is unknown.
pub fn render_trace_dat(trace: &ForecastTrace) -> String {
    let mut s = String::from("# step actual predicted\n");
    for (i, p) in trace.predictions.iter().enumerate() {
        let a = trace.actual.as_ref().map_or(f64::NAN, |a| a[i]);
        let _ = writeln!(s, "{} {} {}", i + 1, a, p);
    }
    s
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Writes the report. CSV and markdown go to the file `out`; gnuplot data
/// goes into the directory `out`, one file per table row with a trace plus
/// `table.dat`. Returns the paths written.
pub fn emit_report(
    out: &MatrixOutput,
    format: ReportFormat,
    path: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    if out.results.is_empty() {
        return Err(input_err("no results to report"));
    }
    match format {
        ReportFormat::Csv => {
            std::fs::write(path, render_csv(out)?)?;
            Ok(vec![path.to_path_buf()])
        }
        ReportFormat::Markdown => {
            std::fs::write(path, render_markdown(out))?;
            Ok(vec![path.to_path_buf()])
        }
        ReportFormat::Gnuplot => {
            std::fs::create_dir_all(path)?;
            let mut written = Vec::new();
            let mut table = String::from("# row model regime horizon test_rmse\n");
            for (i, row) in out.table.iter().enumerate() {
                let _ = writeln!(
                    table,
                    "{i} {} {} {} {}",
                    row.model,
                    row.regime,
                    row.horizon,
                    row.test_rmse.unwrap_or(f64::NAN)
                );
                let trace = out.results[row.result]
                    .horizon(row.horizon)
                    .and_then(|h| h.trace.as_ref());
                if let Some(t) = trace {
                    let name = format!(
                        "{i:03}_{}_{}_h{}.dat",
                        slug(&row.model),
                        slug(&row.regime),
                        row.horizon
                    );
                    let p = path.join(name);
                    std::fs::write(&p, render_trace_dat(t))?;
                    written.push(p);
                }
            }
            let p = path.join("table.dat");
            std::fs::write(&p, table)?;
            written.push(p);
            Ok(written)
        }
    }
}

/// Parses a CSV report back into `(model, config, regime, horizon,
/// train_rmse, test_rmse, wall_seconds, ratio)` rows.
#[allow(clippy::type_complexity)]
pub fn parse_csv_report(
    text: &str,
) -> Result<
    Vec<(
        String,
        String,
        String,
        usize,
        Option<f64>,
        Option<f64>,
        f64,
        Option<f64>,
    )>,
> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    if rdr.headers()?.iter().collect::<Vec<_>>().join(",") != CSV_REPORT_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("report header must be {CSV_REPORT_HEADER}"),
        });
    }
    let opt = |s: &str, line: u64| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::Parse {
                line,
                message: format!("bad number {s:?}"),
            })
        }
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let horizon = rec[3].parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad horizon {:?}", &rec[3]),
        })?;
        rows.push((
            rec[0].to_string(),
            rec[1].to_string(),
            rec[2].to_string(),
            horizon,
            opt(&rec[4], line)?,
            opt(&rec[5], line)?,
            opt(&rec[6], line)?.unwrap_or(0.0),
            opt(&rec[7], line)?,
        ));
    }
    Ok(rows)
}

pub fn regime_from_name(name: &str) -> Result<RegimeKind> {
    RegimeKind::ALL
        .into_iter()
        .find(|r| r.name() == name)
        .ok_or_else(|| {
            input_err(format!(
                "unknown regime {name:?}; expected normal, volatile or trending"
            ))
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth(regime: RegimeKind, days: usize) -> DataConfig {
        DataConfig::Synthetic {
            regime,
            days,
            mu: None,
            sigma: None,
            seed: 7,
        }
    }

    fn quick(model: ModelConfig, regime: RegimeKind) -> ExperimentConfig {
        let train = match model {
            ModelConfig::Lstm { .. } => TrainConfig {
                batch_size: Some(32),
                ..TrainConfig::adam(0.01, 3)
            },
            ModelConfig::Kan { .. } => TrainConfig::lbfgs(3),
        };
        ExperimentConfig {
            lookback: 5,
            forecast_horizons: vec![1, 3],
            max_origins: 5,
            feature_mode: FeatureMode::CloseOnly,
            train: Some(train),
            ..ExperimentConfig::new(model, synth(regime, 120))
        }
    }

    fn lstm() -> ModelConfig {
        ModelConfig::Lstm {
            layers: 1,
            units: 3,
            head_activation: Activation::Linear,
        }
    }

    fn kan() -> ModelConfig {
        ModelConfig::Kan {
            grid: 3,
            k: 2,
            hidden: Some(vec![3]),
        }
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let ok = r#"{"model":{"kind":"kan","grid":3,"k":2},"data":{"kind":"synthetic","regime":"normal","days":200,"seed":1}}"#;
        let c = ExperimentConfig::from_json(ok).unwrap();
        assert_eq!(
            (c.lookback, c.horizon, c.train_frac, c.max_origins),
            (20, 1, 0.8, 50)
        );
        let typo = ok.replace("\"seed\":1", "\"sed\":1");
        assert!(matches!(
            ExperimentConfig::from_json(&typo),
            Err(Error::Config(_))
        ));
        let top = ok.replacen('{', "{\"lookbak\":3,", 1);
        assert!(matches!(
            ExperimentConfig::from_json(&top),
            Err(Error::Config(_))
        ));
        let model = ok.replace("\"k\":2", "\"k\":2,\"width\":3");
        assert!(matches!(
            ExperimentConfig::from_json(&model),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = quick(lstm(), RegimeKind::Normal);
        assert!(c.validate().is_ok());
        c.train_frac = 1.0;
        assert!(c.validate().is_err());
        let mut c = quick(lstm(), RegimeKind::Normal);
        c.horizon = 2;
        assert!(c.validate().is_err());
        c.forecast_horizons.clear();
        assert!(c.validate().is_ok());
        let mut c = quick(lstm(), RegimeKind::Normal);
        c.data = synth(RegimeKind::Normal, 10);
        assert!(c.validate().is_err());
        let mut c = quick(lstm(), RegimeKind::Normal);
        c.model = ModelConfig::Lstm {
            layers: 1,
            units: 2,
            head_activation: Activation::Silu,
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_kan_width_is_capped() {
        let m = ModelConfig::Kan {
            grid: 3,
            k: 2,
            hidden: None,
        };
        match m.build(20, 6, &mut Rng::new(0)).unwrap() {
            Model::Kan(net) => assert_eq!(net.dims(), vec![120, 64, 1]),
            _ => unreachable!(),
        }
        match m.build(3, 1, &mut Rng::new(0)).unwrap() {
            Model::Kan(net) => assert_eq!(net.dims(), vec![3, 7, 1]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn scaler_uses_training_rows_only() {
        let c = quick(lstm(), RegimeKind::Trending);
        let series = c.data.load().unwrap();
        let p = prepare(&series, &c).unwrap();
        let rows = p.train.len() + c.lookback + c.horizon - 1;
        let closes: Vec<f64> = series.column(Feature::Close)[..rows].to_vec();
        let refit = MinMaxScaler::fit(
            &[Feature::Close],
            &Matrix::from_vec(rows, 1, closes).unwrap(),
        )
        .unwrap();
        assert_eq!(refit, p.scaler);
        assert_eq!(p.train.len() + p.test.len(), sample_count(120, 5, 1));
    }

    #[test]
    fn spread_is_even_and_bounded() {
        assert_eq!(spread(3, 7, 10), vec![3, 4, 5, 6, 7]);
        assert_eq!(spread(0, 100, 3), vec![0, 50, 100]);
        assert_eq!(spread(5, 9, 1), vec![5]);
    }

    #[test]
    fn experiment_is_deterministic() {
        for m in [lstm(), kan()] {
            let c = quick(m, RegimeKind::Normal);
            let a = run_experiment(&c).unwrap();
            let b = run_experiment(&c).unwrap();
            assert!(a.failure.is_none(), "{:?}", a.failure);
            assert_eq!(a.canonical_json().unwrap(), b.canonical_json().unwrap());
            assert!(a.wall_seconds >= 0.0);
            assert_eq!(a.horizons.len(), 2);
            assert!(a
                .horizons
                .iter()
                .all(|h| h.status == "ok" && h.rmse.unwrap().is_finite()));
            let t = a.horizon(3).unwrap().trace.as_ref().unwrap();
            assert_eq!(t.predictions.len(), 3);
            assert_eq!(t.actual.as_ref().unwrap().len(), 3);
        }
    }

    #[test]
    fn horizon_one_matches_one_step_scoring() {
        let mut c = quick(lstm(), RegimeKind::Normal);
        c.forecast_horizons = vec![1];
        c.max_origins = 1000;
        let r = run_experiment(&c).unwrap();
        let h = r.horizon(1).unwrap();
        assert_eq!(h.origins, (120 - 5) - train_count(116, 0.8).unwrap());
        assert!((h.rmse.unwrap() - r.test_rmse.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn long_horizon_is_unavailable_not_fatal() {
        let mut c = quick(lstm(), RegimeKind::Normal);
        c.forecast_horizons = vec![1, 500];
        let r = run_experiment(&c).unwrap();
        assert!(r.failure.is_none());
        let h = r.horizon(500).unwrap();
        assert!(h.status.starts_with("unavailable"), "{}", h.status);
        assert!(h.rmse.is_none());
    }

    #[test]
    fn training_blowup_is_recorded() {
        let mut c = quick(lstm(), RegimeKind::Volatile);
        c.train = Some(TrainConfig::adam(1e300, 3));
        let r = run_experiment(&c).unwrap();
        assert!(
            r.failure.as_deref().unwrap_or("").starts_with("training"),
            "{:?}",
            r.failure
        );
    }

    #[test]
    fn single_config_has_no_ratio() {
        let r = run_matrix(&[quick(lstm(), RegimeKind::Normal)], 1).unwrap();
        let table = comparison_table(&r, Aggregate::All);
        assert_eq!(table.len(), 2);
        assert!(table.iter().all(|row| row.ratio.is_none()));
    }

    #[test]
    fn duplicate_configs_give_identical_rows() {
        let c = quick(kan(), RegimeKind::Normal);
        let r = run_matrix(&[c.clone(), c], 2).unwrap();
        assert_eq!(
            r[0].canonical_json().unwrap(),
            r[1].canonical_json().unwrap()
        );
    }

    #[test]
    fn ratios_recomputed_from_rows() {
        let mut configs = Vec::new();
        for regime in [RegimeKind::Normal, RegimeKind::Volatile] {
            for m in [lstm(), kan()] {
                let mut c = quick(m, regime);
                c.forecast_horizons = vec![1, 2];
                configs.push(c);
            }
        }
        let out = MatrixOutput::from_results(run_matrix(&configs, 2).unwrap(), Aggregate::All);
        assert_eq!(out.table.len(), 8);
        for row in &out.table {
            let pick = |model: &str| {
                out.table
                    .iter()
                    .find(|r| {
                        r.model == model && r.regime == row.regime && r.horizon == row.horizon
                    })
                    .and_then(|r| r.test_rmse)
                    .unwrap()
            };
            let expect = pick("kan") / pick("lstm");
            assert!((row.ratio.unwrap() - expect).abs() <= 1e-12 * expect.abs());
        }
    }

    #[test]
    fn parallel_matches_serial_and_seeds_are_isolated() {
        let base = quick(lstm(), RegimeKind::Normal);
        let configs: Vec<ExperimentConfig> = (0..4)
            .map(|s| ExperimentConfig {
                seed: s,
                ..base.clone()
            })
            .collect();
        let one = MatrixOutput::from_results(run_matrix(&configs, 1).unwrap(), Aggregate::All);
        let four = MatrixOutput::from_results(run_matrix(&configs, 4).unwrap(), Aggregate::All);
        assert_eq!(
            one.canonical_json().unwrap(),
            four.canonical_json().unwrap()
        );

        let mut changed = configs.clone();
        changed[2].seed = 99;
        let other = run_matrix(&changed, 2).unwrap();
        for (i, (a, b)) in one.results.iter().zip(&other).enumerate() {
            let same = a.canonical_json().unwrap() == b.canonical_json().unwrap();
            assert_eq!(same, i != 2, "result {i}");
        }
    }

    #[test]
    fn best_aggregation_keeps_lowest() {
        let mk = |model: &str, rmse: f64| {
            let mut r = ExperimentResult::failed(&quick(lstm(), RegimeKind::Normal), String::new());
            r.failure = None;
            r.model = model.into();
            r.config.forecast_horizons = vec![];
            r.test_rmse = Some(rmse);
            r.train_rmse = Some(rmse);
            r
        };
        let results = vec![
            mk("lstm", 0.3),
            mk("lstm", 0.1),
            mk("kan", 0.5),
            mk("kan", 0.4),
        ];
        let table = comparison_table(&results, Aggregate::Best);
        assert_eq!(table.len(), 2);
        assert_eq!(table[0].test_rmse, Some(0.1));
        assert_eq!(table[1].test_rmse, Some(0.4));
        assert!((table[0].ratio.unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn reports_round_trip() {
        let configs = vec![
            quick(lstm(), RegimeKind::Normal),
            quick(kan(), RegimeKind::Normal),
        ];
        let out = MatrixOutput::from_results(run_matrix(&configs, 2).unwrap(), Aggregate::All);
        let dir = tempfile::tempdir().unwrap();

        let csv_path = dir.path().join("r.csv");
        emit_report(&out, ReportFormat::Csv, &csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_REPORT_HEADER);
        let parsed = parse_csv_report(&text).unwrap();
        assert_eq!(parsed.len(), out.table.len());
        let r4 = |v: f64| (v * 1e4).round() / 1e4;
        for (p, row) in parsed.iter().zip(&out.table) {
            assert_eq!(
                (&p.0, &p.1, &p.2, p.3),
                (&row.model, &row.config, &row.regime, row.horizon)
            );
            assert_eq!(p.4, row.train_rmse.map(r4));
            assert_eq!(p.5, row.test_rmse.map(r4));
            assert_eq!(p.7, row.ratio.map(r4));
        }

        let md = dir.path().join("r.md");
        emit_report(&out, ReportFormat::Markdown, &md).unwrap();
        let text = std::fs::read_to_string(&md).unwrap();
        assert!(text.contains("Mean training time"));
        assert_eq!(
            text.lines()
                .filter(|l| l.starts_with("| lstm") || l.starts_with("| kan"))
                .count(),
            4 + 2
        );

        let gp = dir.path().join("gp");
        let files = emit_report(&out, ReportFormat::Gnuplot, &gp).unwrap();
        assert_eq!(files.len(), 5);
        let row = &out.table[1];
        let trace = out.results[row.result]
            .horizon(row.horizon)
            .unwrap()
            .trace
            .as_ref()
            .unwrap();
        let text = std::fs::read_to_string(&files[1]).unwrap();
        let cols: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(cols.len(), trace.predictions.len());
        for (i, c) in cols.iter().enumerate() {
            assert_eq!(c[0], (i + 1) as f64);
            assert_eq!(c[1], trace.actual.as_ref().unwrap()[i]);
            assert_eq!(c[2], trace.predictions[i]);
        }

        let back = MatrixOutput::from_json(&out.to_json().unwrap()).unwrap();
        assert_eq!(back, out);
    }

    #[test]
    fn runtime_summary_averages() {
        let out = MatrixOutput::from_results(
            run_matrix(
                &[
                    quick(lstm(), RegimeKind::Normal),
                    quick(kan(), RegimeKind::Normal),
                ],
                1,
            )
            .unwrap(),
            Aggregate::All,
        );
        assert_eq!(out.runtime.len(), 2);
        assert!(out
            .runtime
            .iter()
            .all(|r| r.runs == 1 && r.mean_wall_seconds >= 0.0));
    }

    #[test]
    fn matrix_seed_expansion() {
        let m = MatrixConfig {
            experiments: vec![
                quick(lstm(), RegimeKind::Normal),
                quick(kan(), RegimeKind::Normal),
            ],
            seeds: Some(vec![1, 2, 3]),
            aggregate: Aggregate::Best,
        };
        let e = m.expand();
        assert_eq!(e.len(), 6);
        assert_eq!(
            e.iter().map(|c| c.seed).collect::<Vec<_>>(),
            vec![1, 2, 3, 1, 2, 3]
        );
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(MatrixConfig::from_json(&text).unwrap(), m);
        assert!(MatrixConfig::from_json(r#"{"experiments":[]}"#).is_err());
    }
}
