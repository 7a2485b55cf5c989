//! Kolmogorov-Arnold networks and LSTMs for time-series forecasting,
//! built from scratch, plus the data pipeline, iterative multi-step
//! forecasting and the experiment runner that compares them.

pub mod bench;
pub mod bspline;
pub mod data;
pub mod error;
pub mod forecast;
pub mod kan;
pub mod lstm;
pub mod metrics;
pub mod numcore;
pub mod optim;

pub use error::{Error, Result};
