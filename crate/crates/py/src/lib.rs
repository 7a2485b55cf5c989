//! Python bindings: `import kanbench`.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::kanbench::bench::{self, regime_from_name, ExperimentConfig, MatrixConfig, MatrixOutput};
use ::kanbench::bspline::{basis_eval as core_basis_eval, SplineSpec};
use ::kanbench::data::{gen_synthetic as core_gen_synthetic, MarketRegime};
use ::kanbench::kan::{kan_init, KanNetwork as CoreKan};
use ::kanbench::lstm::{lstm_init, LstmNetwork as CoreLstm};
use ::kanbench::numcore::{Activation, Matrix, Rng};
use ::kanbench::optim::{train, TrainConfig, TrainReport};

fn err(e: ::kanbench::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn train_config(
    optimizer: &str,
    epochs: usize,
    lr: f64,
    batch_size: Option<usize>,
    seed: u64,
) -> PyResult<TrainConfig> {
    let base = match optimizer {
        "adam" => TrainConfig::adam(lr, epochs),
        "lbfgs" => TrainConfig::lbfgs(epochs),
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown optimizer {other:?}; expected adam or lbfgs"
            )))
        }
    };
    Ok(TrainConfig {
        batch_size,
        shuffle_seed: seed,
        ..base
    })
}

fn report_dict<'py>(py: Python<'py>, r: &TrainReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epochs", r.epochs)?;
    d.set_item("rmse_history", r.rmse_history.clone())?;
    d.set_item("final_rmse", r.final_rmse)?;
    d.set_item("wall_seconds", r.wall_seconds)?;
    d.set_item("converged", r.converged)?;
    d.set_item("stalled", r.stalled)?;
    Ok(d)
}

/// Kolmogorov-Arnold network with B-spline edge functions.
#[pyclass(name = "KanNetwork", module = "kanbench")]
struct PyKan {
    inner: CoreKan,
}

#[pymethods]
impl PyKan {
    #[new]
    #[pyo3(signature = (dims, grid=5, k=3, seed=0, lo=0.0, hi=1.0))]
    fn new(dims: Vec<usize>, grid: usize, k: usize, seed: u64, lo: f64, hi: f64) -> PyResult<Self> {
        let spec = SplineSpec::new(grid, k, lo, hi).map_err(err)?;
        Ok(Self {
            inner: kan_init(&dims, spec, &mut Rng::new(seed)).map_err(err)?,
        })
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims()
    }

    fn forward(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.forward(&x).map_err(err)
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params()
    }

    fn set_params(&mut self, params: Vec<f64>) -> PyResult<()> {
        self.inner.set_params(&params).map_err(err)
    }

    #[pyo3(signature = (inputs, targets, optimizer="lbfgs", epochs=100, lr=1e-3, batch_size=None, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        inputs: Vec<Vec<f64>>,
        targets: Vec<f64>,
        optimizer: &str,
        epochs: usize,
        lr: f64,
        batch_size: Option<usize>,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let cfg = train_config(optimizer, epochs, lr, batch_size, seed)?;
        let r = train(&mut self.inner, &inputs, &targets, &cfg).map_err(err)?;
        report_dict(py, &r)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreKan::from_json(text).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("KanNetwork(dims={:?})", self.inner.dims())
    }
}

fn activation(name: &str) -> PyResult<Activation> {
    match name {
        "linear" => Ok(Activation::Linear),
        "tanh" => Ok(Activation::Tanh),
        other => Err(PyValueError::new_err(format!(
            "head activation must be linear or tanh, got {other:?}"
        ))),
    }
}

fn sequence(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

/// Stacked LSTM with a scalar regression head.
#[pyclass(name = "LstmNetwork", module = "kanbench")]
struct PyLstm {
    inner: CoreLstm,
}

#[pymethods]
impl PyLstm {
    #[new]
    #[pyo3(signature = (layers, input_size, head="linear", seed=0))]
    fn new(layers: Vec<usize>, input_size: usize, head: &str, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: lstm_init(&layers, input_size, activation(head)?, &mut Rng::new(seed))
                .map_err(err)?,
        })
    }

    /// Prediction for one sequence given as a list of time steps.
    fn forward(&self, seq: Vec<Vec<f64>>) -> PyResult<f64> {
        self.inner.forward(&sequence(seq)?).map_err(err)
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params()
    }

    fn set_params(&mut self, params: Vec<f64>) -> PyResult<()> {
        self.inner.set_params(&params).map_err(err)
    }

    #[pyo3(signature = (sequences, targets, optimizer="adam", epochs=100, lr=1e-3, batch_size=None, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        sequences: Vec<Vec<Vec<f64>>>,
        targets: Vec<f64>,
        optimizer: &str,
        epochs: usize,
        lr: f64,
        batch_size: Option<usize>,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let seqs = sequences
            .into_iter()
            .map(sequence)
            .collect::<PyResult<Vec<_>>>()?;
        let cfg = train_config(optimizer, epochs, lr, batch_size, seed)?;
        let r = train(&mut self.inner, &seqs, &targets, &cfg).map_err(err)?;
        report_dict(py, &r)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreLstm::from_json(text).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("LstmNetwork(params={})", self.inner.param_count())
    }
}

/// All B-spline basis values at `x`.
#[pyfunction]
#[pyo3(signature = (x, grid, k, lo=0.0, hi=1.0))]
fn basis_eval(x: f64, grid: usize, k: usize, lo: f64, hi: f64) -> PyResult<Vec<f64>> {
    let spec = SplineSpec::new(grid, k, lo, hi).map_err(err)?;
    core_basis_eval(&spec, x).map_err(err)
}

/// Synthetic OHLCV series as a dict of columns.
#[pyfunction]
#[pyo3(signature = (regime, days, seed, mu=None, sigma=None))]
fn gen_synthetic<'py>(
    py: Python<'py>,
    regime: &str,
    days: usize,
    seed: u64,
    mu: Option<f64>,
    sigma: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut r = MarketRegime::new(regime_from_name(regime).map_err(err)?, days, seed);
    if let Some(m) = mu {
        r.mu = m;
    }
    if let Some(s) = sigma {
        r.sigma = s;
    }
    let s = core_gen_synthetic(&r).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item(
        "date",
        s.rows
            .iter()
            .map(|r| r.date.to_string())
            .collect::<Vec<_>>(),
    )?;
    for f in ::kanbench::data::Feature::ALL {
        d.set_item(f.name(), s.column(f))?;
    }
    Ok(d)
}

#[pyfunction]
fn rmse(actual: Vec<f64>, predicted: Vec<f64>) -> PyResult<f64> {
    Ok(::kanbench::metrics::rmse(&actual, &predicted)
        .map_err(err)?
        .rmse)
}

/// Runs one experiment from its JSON config; returns the result as JSON.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(err)?;
    let r = py.detach(|| bench::run_experiment(&cfg)).map_err(err)?;
    r.to_json().map_err(err)
}

/// Runs a matrix config; returns the full output (results, table, runtime)
/// as JSON.
#[pyfunction]
#[pyo3(signature = (matrix_json, parallel=1))]
fn run_matrix(py: Python<'_>, matrix_json: &str, parallel: usize) -> PyResult<String> {
    let m = MatrixConfig::from_json(matrix_json).map_err(err)?;
    let results = py
        .detach(|| bench::run_matrix(&m.expand(), parallel))
        .map_err(err)?;
    MatrixOutput::from_results(results, m.aggregate)
        .to_json()
        .map_err(err)
}

#[pymodule]
#[pyo3(name = "kanbench")]
fn kanbench_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyKan>()?;
    m.add_class::<PyLstm>()?;
    m.add_function(wrap_pyfunction!(basis_eval, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(run_matrix, m)?)?;
    Ok(())
}
