//! Accuracy metrics and training-time bookkeeping.

use serde::{Deserialize, Serialize};

use crate::data::{Feature, MinMaxScaler};
use crate::error::{input_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    /// Square root of `mse`, in scaled units.
    pub rmse: f64,
    /// RMSE after inverse scaling, in price units.
    pub rmse_price: Option<f64>,
    pub n: usize,
    pub wall_seconds: f64,
}

fn mse(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    if actual.len() != predicted.len() {
        return Err(input_err(format!(
            "{} actual values but {} predictions",
            actual.len(),
            predicted.len()
        )));
    }
    if actual.is_empty() {
        return Err(input_err("cannot score an empty prediction set"));
    }
    if actual.iter().chain(predicted).any(|v| !v.is_finite()) {
        return Err(input_err("metric inputs must be finite"));
    }
    Ok(actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (a - p) * (a - p))
        .sum::<f64>()
        / actual.len() as f64)
}

/// `sqrt(mean((actual - predicted)^2))`.
pub fn rmse(actual: &[f64], predicted: &[f64]) -> Result<EvalReport> {
    let mse = mse(actual, predicted)?;
    Ok(EvalReport {
        mse,
        rmse: mse.sqrt(),
        rmse_price: None,
        n: actual.len(),
        wall_seconds: 0.0,
    })
}

/// RMSE in scaled units plus price units recovered through `scaler`.
pub fn evaluate(
    actual: &[f64],
    predicted: &[f64],
    scaler: &MinMaxScaler,
    target: Feature,
    wall_seconds: f64,
) -> Result<EvalReport> {
    let mut report = rmse(actual, predicted)?;
    let a = scaler.inverse(actual, target)?;
    let p = scaler.inverse(predicted, target)?;
    report.rmse_price = Some(mse(&a, &p)?.sqrt());
    report.wall_seconds = wall_seconds.max(0.0);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_is_zero() {
        assert_eq!(rmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().rmse, 0.0);
    }

    #[test]
    fn hand_value() {
        let r = rmse(&[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert!((r.rmse - 1.5811388300841898).abs() < 1e-15);
        assert_eq!(r.mse, 2.5);
        assert_eq!(r.n, 2);
    }

    #[test]
    fn bad_inputs() {
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn price_units() {
        let sc = MinMaxScaler {
            features: vec![Feature::Close],
            mins: vec![100.0],
            maxs: vec![200.0],
        };
        let r = evaluate(&[0.5, 0.5], &[0.6, 0.4], &sc, Feature::Close, 1.5).unwrap();
        assert!((r.rmse - 0.1).abs() < 1e-12);
        assert!((r.rmse_price.unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(r.wall_seconds, 1.5);
    }

    fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(-100.0..100.0f64, n),
                prop::collection::vec(-100.0..100.0f64, n),
            )
        })
    }

    proptest! {
        #[test]
        fn symmetric_shift_and_scale((a, b) in pair(), c in -50.0..50.0f64, k in -5.0..5.0f64) {
            let base = rmse(&a, &b).unwrap();
            prop_assert!((base.rmse * base.rmse - base.mse).abs() <= 1e-15 * base.mse.max(f64::MIN_POSITIVE) * 4.0);
            prop_assert_eq!(rmse(&b, &a).unwrap().rmse, base.rmse);
            let sa: Vec<f64> = a.iter().map(|x| x + c).collect();
            let sb: Vec<f64> = b.iter().map(|x| x + c).collect();
            prop_assert!((rmse(&sa, &sb).unwrap().rmse - base.rmse).abs() <= 1e-9 * (1.0 + base.rmse));
            let ka: Vec<f64> = a.iter().map(|x| x * k).collect();
            let kb: Vec<f64> = b.iter().map(|x| x * k).collect();
            prop_assert!((rmse(&ka, &kb).unwrap().rmse - k.abs() * base.rmse).abs() <= 1e-9 * (1.0 + base.rmse));
        }

        #[test]
        fn permutation_invariant((a, b) in pair(), seed in 0u64..100) {
            let mut idx: Vec<usize> = (0..a.len()).collect();
            crate::numcore::Rng::new(seed).shuffle(&mut idx);
            let pa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
            let pb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
            let (x, y) = (rmse(&a, &b).unwrap().rmse, rmse(&pa, &pb).unwrap().rmse);
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x));
        }
    }
}
