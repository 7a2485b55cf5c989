//! Iterative multi-step forecasting shared by both model families.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Feature, MinMaxScaler, WindowedDataset};
use crate::error::{input_err, shape_err, Error, Result};
use crate::kan::KanNetwork;
use crate::lstm::LstmNetwork;
use crate::numcore::Matrix;
use crate::optim::{train, TrainConfig, TrainReport};

/// A trained forecaster of either family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "network", rename_all = "lowercase")]
pub enum Model {
    Kan(KanNetwork),
    Lstm(LstmNetwork),
}

impl Model {
    pub fn tag(&self) -> &'static str {
        match self {
            Model::Kan(_) => "kan",
            Model::Lstm(_) => "lstm",
        }
    }

    /// One-step prediction from an `L × F` window. A KAN sees the window
    /// flattened row-major; an LSTM reads it as a length-`L` sequence.
    pub fn predict_window(&self, window: &Matrix) -> Result<f64> {
        match self {
            Model::Kan(net) => {
                if net.input_dim() != window.rows() * window.cols() {
                    return Err(shape_err(format!(
                        "KAN expects {} inputs, window is {}x{}",
                        net.input_dim(),
                        window.rows(),
                        window.cols()
                    )));
                }
                net.forward(window.data())
            }
            Model::Lstm(net) => net.forward(window),
        }
    }

    pub fn predict_all(&self, ds: &WindowedDataset) -> Result<Vec<f64>> {
        ds.inputs.iter().map(|w| self.predict_window(w)).collect()
    }

    pub fn fit(&mut self, ds: &WindowedDataset, config: &TrainConfig) -> Result<TrainReport> {
        match self {
            Model::Kan(net) => train(net, &ds.flat_inputs(), &ds.targets, config),
            Model::Lstm(net) => train(net, &ds.inputs, &ds.targets, config),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Model::Kan(net) => net.param_count(),
            Model::Lstm(net) => net.param_count(),
        }
    }
}

/// A saved model plus everything needed to forecast from fresh data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub model: Model,
    pub scaler: MinMaxScaler,
    pub target: Feature,
    pub lookback: usize,
    pub overwrite: Vec<usize>,
    /// Scaled rows available at save time; the tail seeds forecasts.
    pub history: Matrix,
    pub train_report: TrainReport,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        match &ck.model {
            Model::Kan(net) => {
                KanNetwork::new(net.layers().to_vec())?;
            }
            Model::Lstm(net) => {
                LstmNetwork::new(
                    net.cells().to_vec(),
                    net.head_weights().clone(),
                    net.head_bias(),
                    net.head_activation(),
                )?;
            }
        }
        if ck.history.cols() != ck.scaler.features.len() {
            return Err(shape_err(
                "checkpoint history width differs from its scaler",
            ));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastTrace {
    pub model: String,
    pub horizon: usize,
    /// Scaled predictions, one per step.
    pub predictions: Vec<f64>,
    /// Scaled ground truth aligned with `predictions`, when known.
    pub actual: Option<Vec<f64>>,
}

impl ForecastTrace {
    pub fn with_actual(mut self, actual: Vec<f64>) -> Result<Self> {
        if actual.len() != self.predictions.len() {
            return Err(shape_err(format!(
                "{} actual values for {} predictions",
                actual.len(),
                self.predictions.len()
            )));
        }
        self.actual = Some(actual);
        Ok(self)
    }

    /// Writes `step,predicted_scaled,predicted_price,actual_price`; the last
    /// column is empty when ground truth is unknown.
    pub fn write_csv(
        &self,
        scaler: &MinMaxScaler,
        target: Feature,
        path: impl AsRef<Path>,
    ) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "step",
            "predicted_scaled",
            "predicted_price",
            "actual_price",
        ])?;
        for (i, &p) in self.predictions.iter().enumerate() {
            let actual = match &self.actual {
                Some(a) => scaler.inverse_one(a[i], target)?.to_string(),
                None => String::new(),
            };
            w.write_record([
                (i + 1).to_string(),
                p.to_string(),
                scaler.inverse_one(p, target)?.to_string(),
                actual,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Column indices a prediction is written into when building the next
/// pseudo-row: the close and adjusted-close columns that are present.
pub fn overwrite_columns(features: &[Feature]) -> Vec<usize> {
    features
        .iter()
        .enumerate()
        .filter(|(_, f)| matches!(f, Feature::Close | Feature::AdjClose))
        .map(|(i, _)| i)
        .collect()
}

/// Produces `horizon` one-step predictions, feeding each back in.
///
/// After each step the last window row is copied, the `overwrite` columns
/// are set to the prediction, and the window slides forward by one row.
pub fn iterative_forecast(
    model: &Model,
    seed_window: &Matrix,
    horizon: usize,
    overwrite: &[usize],
) -> Result<ForecastTrace> {
    if horizon == 0 {
        return Err(input_err("forecast horizon must be at least 1"));
    }
    let (l, f) = seed_window.shape();
    if l == 0 || f == 0 {
        return Err(shape_err("seed window is empty"));
    }
    if let Some(&c) = overwrite.iter().find(|&&c| c >= f) {
        return Err(input_err(format!(
            "overwrite column {c} outside {f} features"
        )));
    }
    let mut window = seed_window.clone();
    let mut predictions = Vec::with_capacity(horizon);
    for step in 0..horizon {
        let p = model.predict_window(&window)?;
        if !p.is_finite() {
            return Err(Error::NonFiniteForecast { step: step + 1 });
        }
        predictions.push(p);
        if step + 1 < horizon {
            let mut next = window.row(l - 1).to_vec();
            for &c in overwrite {
                next[c] = p;
            }
            let data = window.data_mut();
            data.copy_within(f.., 0);
            data[(l - 1) * f..].copy_from_slice(&next);
        }
    }
    Ok(ForecastTrace {
        model: model.tag().to_string(),
        horizon,
        predictions,
        actual: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::SplineSpec;
    use crate::kan::kan_init;
    use crate::lstm::lstm_init;
    use crate::numcore::{Activation, Rng};
    use proptest::prelude::*;

    fn window(l: usize, f: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_vec(l, f, (0..l * f).map(|_| rng.uniform()).collect()).unwrap()
    }

    fn tiny_kan(l: usize, f: usize, seed: u64) -> Model {
        Model::Kan(
            kan_init(
                &[l * f, 3, 1],
                SplineSpec::new(4, 3, 0.0, 1.0).unwrap(),
                &mut Rng::new(seed),
            )
            .unwrap(),
        )
    }

    fn tiny_lstm(f: usize, seed: u64) -> Model {
        Model::Lstm(lstm_init(&[4], f, Activation::Linear, &mut Rng::new(seed)).unwrap())
    }

    #[test]
    fn one_step_equals_direct_prediction() {
        let w = window(5, 2, 1);
        for m in [tiny_kan(5, 2, 2), tiny_lstm(2, 3)] {
            let t = iterative_forecast(&m, &w, 1, &[1]).unwrap();
            assert_eq!(t.predictions, vec![m.predict_window(&w).unwrap()]);
        }
    }

    #[test]
    fn zero_lstm_forecasts_zeros() {
        let mut net = lstm_init(&[3], 2, Activation::Linear, &mut Rng::new(0)).unwrap();
        let n = net.param_count();
        net.set_params(&vec![0.0; n]).unwrap();
        let t = iterative_forecast(&Model::Lstm(net), &window(4, 2, 5), 6, &[0]).unwrap();
        assert_eq!(t.predictions, vec![0.0; 6]);
    }

    #[test]
    fn matches_hand_chained_steps() {
        let m = tiny_kan(3, 2, 11);
        let w0 = Matrix::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]]).unwrap();
        let p1 = m.predict_window(&w0).unwrap();
        let w1 = Matrix::from_rows(&[vec![0.3, 0.4], vec![0.5, 0.6], vec![0.5, p1]]).unwrap();
        let p2 = m.predict_window(&w1).unwrap();
        let w2 = Matrix::from_rows(&[vec![0.5, 0.6], vec![0.5, p1], vec![0.5, p2]]).unwrap();
        let p3 = m.predict_window(&w2).unwrap();
        let t = iterative_forecast(&m, &w0, 3, &[1]).unwrap();
        assert_eq!(t.predictions, vec![p1, p2, p3]);
    }

    #[test]
    fn overwrite_columns_for_full_and_close_only() {
        assert_eq!(overwrite_columns(&Feature::ALL), vec![3, 4]);
        assert_eq!(overwrite_columns(&[Feature::Close]), vec![0]);
    }

    #[test]
    fn rejects_bad_arguments() {
        let m = tiny_lstm(2, 1);
        assert!(iterative_forecast(&m, &window(3, 2, 0), 0, &[0]).is_err());
        assert!(iterative_forecast(&m, &window(3, 2, 0), 2, &[2]).is_err());
        assert!(iterative_forecast(&tiny_kan(3, 2, 0), &window(4, 2, 0), 1, &[0]).is_err());
    }

    #[test]
    fn non_finite_prediction_reports_step() {
        let mut net = lstm_init(&[2], 1, Activation::Linear, &mut Rng::new(0)).unwrap();
        let mut p = net.params();
        let last = p.len() - 1;
        p[last] = f64::NAN;
        net.set_params(&p).unwrap();
        let err = iterative_forecast(&Model::Lstm(net), &window(3, 1, 0), 4, &[0]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteForecast { step: 1 }), "{err}");
    }

    #[test]
    fn trace_csv_schema() {
        let sc = MinMaxScaler {
            features: vec![Feature::Close],
            mins: vec![100.0],
            maxs: vec![200.0],
        };
        let t = ForecastTrace {
            model: "kan".into(),
            horizon: 2,
            predictions: vec![0.5, 0.25],
            actual: None,
        }
        .with_actual(vec![0.0, 1.0])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        t.write_csv(&sc, Feature::Close, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "step,predicted_scaled,predicted_price,actual_price\n1,0.5,150,100\n2,0.25,125,200\n"
        );
    }

    #[test]
    fn model_json_round_trip() {
        for m in [tiny_kan(2, 1, 4), tiny_lstm(1, 4)] {
            let text = serde_json::to_string(&m).unwrap();
            let back: Model = serde_json::from_str(&text).unwrap();
            assert_eq!(back, m);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn prefix_consistency(seed in 0u64..1000, h in 1usize..=40) {
            let w = window(4, 2, seed);
            for m in [tiny_kan(4, 2, seed), tiny_lstm(2, seed)] {
                let full = iterative_forecast(&m, &w, 40, &[1]).unwrap();
                let part = iterative_forecast(&m, &w, h, &[1]).unwrap();
                prop_assert_eq!(&full.predictions[..h], &part.predictions[..]);
                prop_assert!(full.predictions.iter().all(|p| p.is_finite()));
            }
        }
    }
}
