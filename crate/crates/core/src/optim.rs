//! Optimizers over a flat parameter view and the shared training loop.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numcore::{dot, Rng};

/// A model that exposes its trainables as one flat vector.
pub trait Trainable {
    type Sample: Clone + Sync;

    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]) -> Result<()>;
    fn predict(&self, sample: &Self::Sample) -> Result<f64>;
    /// Mean squared error over the batch and its gradient in flat order.
    fn loss_and_grad(&self, samples: &[Self::Sample], targets: &[f64]) -> Result<(f64, Vec<f64>)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "AdamConfig::default_lr")]
    pub lr: f64,
    #[serde(default = "AdamConfig::default_beta1")]
    pub beta1: f64,
    #[serde(default = "AdamConfig::default_beta2")]
    pub beta2: f64,
    #[serde(default = "AdamConfig::default_eps")]
    pub eps: f64,
}

impl AdamConfig {
    fn default_lr() -> f64 {
        1e-3
    }
    fn default_beta1() -> f64 {
        0.9
    }
    fn default_beta2() -> f64 {
        0.999
    }
    fn default_eps() -> f64 {
        1e-8
    }

    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: Self::default_lr(),
            beta1: Self::default_beta1(),
            beta2: Self::default_beta2(),
            eps: Self::default_eps(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(param_count: usize, config: AdamConfig) -> Self {
        Self {
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            config,
        }
    }

    /// One bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(shape_err(format!(
                "Adam state holds {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.step(params, grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LbfgsConfig {
    #[serde(default = "LbfgsConfig::default_memory")]
    pub memory: usize,
    #[serde(default = "LbfgsConfig::default_c1")]
    pub c1: f64,
    #[serde(default = "LbfgsConfig::default_c2")]
    pub c2: f64,
    #[serde(default = "LbfgsConfig::default_max_ls_steps")]
    pub max_ls_steps: usize,
}

impl LbfgsConfig {
    fn default_memory() -> usize {
        10
    }
    fn default_c1() -> f64 {
        1e-4
    }
    fn default_c2() -> f64 {
        0.9
    }
    fn default_max_ls_steps() -> usize {
        25
    }
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: Self::default_memory(),
            c1: Self::default_c1(),
            c2: Self::default_c2(),
            max_ls_steps: Self::default_max_ls_steps(),
        }
    }
}

/// Smallest `sᵀy` accepted into memory.
const CURVATURE_EPS: f64 = 1e-10;

#[derive(Debug, Clone)]
struct Point {
    params: Vec<f64>,
    loss: f64,
    grad: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LbfgsState {
    pub config: LbfgsConfig,
    memory: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    current: Option<Point>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOutcome {
    pub step_length: f64,
    pub loss: f64,
    pub grad_norm: f64,
    /// No acceptable step could be found; the caller should stop.
    pub stalled: bool,
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn axpy(x: &[f64], alpha: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + alpha * b).collect()
}

impl LbfgsState {
    pub fn new(config: LbfgsConfig) -> Self {
        Self {
            config,
            memory: VecDeque::with_capacity(config.memory),
            current: None,
        }
    }

    pub fn memory_len(&self) -> usize {
        self.memory.len()
    }

    /// Two-loop recursion: approximate inverse-Hessian times `-grad`.
    pub fn direction(&self, grad: &[f64]) -> Vec<f64> {
        let mut q = grad.to_vec();
        let mut alphas = Vec::with_capacity(self.memory.len());
        for (s, y, rho) in self.memory.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = self
            .memory
            .back()
            .map_or(1.0, |(s, y, _)| dot(s, y) / dot(y, y));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in self.memory.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += si * (a - b));
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    fn evaluate<F>(f: &mut F, params: Vec<f64>) -> Result<Point>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let (loss, grad) = f(&params)?;
        if grad.len() != params.len() {
            return Err(shape_err(format!(
                "gradient has {} entries for {} parameters",
                grad.len(),
                params.len()
            )));
        }
        Ok(Point { params, loss, grad })
    }

    /// Strong-Wolfe line search (bracketing then zoom with safeguarded cubic
    /// interpolation). Returns the accepted point and step length.
    fn strong_wolfe<F>(
        &self,
        f: &mut F,
        x0: &Point,
        d: &[f64],
        alpha_init: f64,
    ) -> Result<Option<(Point, f64)>>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let LbfgsConfig {
            c1,
            c2,
            max_ls_steps,
            ..
        } = self.config;
        let f0 = x0.loss;
        let dphi0 = dot(&x0.grad, d);
        let mut evals = 0;

        let mut lo = (0.0, f0, dphi0);
        let mut alpha = alpha_init;
        let mut hi;
        loop {
            if evals >= max_ls_steps {
                return Ok(None);
            }
            let p = Self::evaluate(f, axpy(&x0.params, alpha, d))?;
            evals += 1;
            let dphi = dot(&p.grad, d);
            if !p.loss.is_finite()
                || p.loss > f0 + c1 * alpha * dphi0
                || (evals > 1 && p.loss >= lo.1)
            {
                hi = (alpha, p.loss, dphi);
                break;
            }
            if dphi.abs() <= -c2 * dphi0 {
                return Ok(Some((p, alpha)));
            }
            if dphi >= 0.0 {
                hi = lo;
                lo = (alpha, p.loss, dphi);
                break;
            }
            lo = (alpha, p.loss, dphi);
            alpha *= 2.0;
        }

        loop {
            if evals >= max_ls_steps {
                return Ok(None);
            }
            let a = interpolate(lo, hi);
            let p = Self::evaluate(f, axpy(&x0.params, a, d))?;
            evals += 1;
            let dphi = dot(&p.grad, d);
            if !p.loss.is_finite() || p.loss > f0 + c1 * a * dphi0 || p.loss >= lo.1 {
                hi = (a, p.loss, dphi);
            } else {
                if dphi.abs() <= -c2 * dphi0 {
                    return Ok(Some((p, a)));
                }
                if dphi * (hi.0 - lo.0) >= 0.0 {
                    hi = lo;
                }
                lo = (a, p.loss, dphi);
            }
            if (hi.0 - lo.0).abs() < 1e-16 * lo.0.abs().max(1.0) {
                return Ok(None);
            }
        }
    }

    /// Armijo backtracking along steepest descent.
    fn backtrack<F>(&self, f: &mut F, x0: &Point) -> Result<Option<(Point, f64)>>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let d: Vec<f64> = x0.grad.iter().map(|g| -g).collect();
        let dphi0 = -dot(&x0.grad, &x0.grad);
        let mut alpha = (1.0 / norm(&x0.grad)).min(1.0);
        for _ in 0..self.config.max_ls_steps {
            let p = Self::evaluate(f, axpy(&x0.params, alpha, &d))?;
            if p.loss.is_finite() && p.loss <= x0.loss + self.config.c1 * alpha * dphi0 {
                return Ok(Some((p, alpha)));
            }
            alpha *= 0.5;
        }
        Ok(None)
    }

    /// One L-BFGS iteration. `params` is updated in place when a step is
    /// accepted.
    pub fn step<F>(&mut self, mut f: F, params: &mut [f64]) -> Result<LbfgsOutcome>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let x0 = match self.current.take() {
            Some(p) if p.params == params => p,
            _ => {
                self.memory.clear();
                Self::evaluate(&mut f, params.to_vec())?
            }
        };
        let gnorm = norm(&x0.grad);
        if gnorm == 0.0 || !x0.loss.is_finite() || !gnorm.is_finite() {
            let out = LbfgsOutcome {
                step_length: 0.0,
                loss: x0.loss,
                grad_norm: gnorm,
                stalled: true,
            };
            self.current = Some(x0);
            return Ok(out);
        }

        let mut d = self.direction(&x0.grad);
        if dot(&d, &x0.grad) >= 0.0 {
            self.memory.clear();
            d = x0.grad.iter().map(|g| -g).collect();
        }
        let alpha_init = if self.memory.is_empty() {
            (1.0 / gnorm).min(1.0)
        } else {
            1.0
        };

        let accepted = match self.strong_wolfe(&mut f, &x0, &d, alpha_init)? {
            Some(found) => Some(found),
            None => {
                self.memory.clear();
                self.backtrack(&mut f, &x0)?
            }
        };
        let Some((next, alpha)) = accepted else {
            let out = LbfgsOutcome {
                step_length: 0.0,
                loss: x0.loss,
                grad_norm: gnorm,
                stalled: true,
            };
            self.current = Some(x0);
            return Ok(out);
        };

        let s: Vec<f64> = next
            .params
            .iter()
            .zip(&x0.params)
            .map(|(a, b)| a - b)
            .collect();
        let y: Vec<f64> = next.grad.iter().zip(&x0.grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > CURVATURE_EPS {
            if self.memory.len() == self.config.memory {
                self.memory.pop_front();
            }
            self.memory.push_back((s, y, 1.0 / sy));
        }
        params.copy_from_slice(&next.params);
        let out = LbfgsOutcome {
            step_length: alpha,
            loss: next.loss,
            grad_norm: norm(&next.grad),
            stalled: false,
        };
        self.current = Some(next);
        Ok(out)
    }
}

/// Minimizer of the cubic through two bracket ends, kept inside the middle
/// 80% of the bracket; falls back to bisection.
fn interpolate(lo: (f64, f64, f64), hi: (f64, f64, f64)) -> f64 {
    let (a0, f0, g0) = lo;
    let (a1, f1, g1) = hi;
    let (left, right) = if a0 < a1 { (a0, a1) } else { (a1, a0) };
    let width = right - left;
    let d1 = g0 + g1 - 3.0 * (f0 - f1) / (a0 - a1);
    let disc = d1 * d1 - g0 * g1;
    if disc >= 0.0 && a0 != a1 {
        let d2 = (a1 - a0).signum() * disc.sqrt();
        let a = a1 - (a1 - a0) * (g1 + d2 - d1) / (g1 - g0 + 2.0 * d2);
        if a.is_finite() && a >= left + 0.1 * width && a <= right - 0.1 * width {
            return a;
        }
    }
    0.5 * (left + right)
}

pub fn lbfgs_step<F>(
    state: &mut LbfgsState,
    loss_and_grad: F,
    params: &mut [f64],
) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    state.step(loss_and_grad, params)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Adam(AdamConfig),
    Lbfgs(LbfgsConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub max_epochs: usize,
    /// Minimum train-RMSE improvement over `window` epochs before stopping.
    #[serde(default = "TrainConfig::default_tol")]
    pub tol: f64,
    #[serde(default = "TrainConfig::default_window")]
    pub window: usize,
    /// Mini-batch size for Adam; `None` means full batch. L-BFGS is always
    /// full batch.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Seed for the per-epoch mini-batch shuffle.
    #[serde(default)]
    pub shuffle_seed: u64,
    /// Elementwise gradient clipping bound; off by default.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    fn default_tol() -> f64 {
        1e-6
    }
    fn default_window() -> usize {
        10
    }

    pub fn adam(lr: f64, max_epochs: usize) -> Self {
        Self {
            optimizer: OptimizerConfig::Adam(AdamConfig::with_lr(lr)),
            max_epochs,
            tol: Self::default_tol(),
            window: Self::default_window(),
            batch_size: None,
            shuffle_seed: 0,
            grad_clip: None,
        }
    }

    pub fn lbfgs(max_epochs: usize) -> Self {
        Self {
            optimizer: OptimizerConfig::Lbfgs(LbfgsConfig::default()),
            ..Self::adam(0.0, max_epochs)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    /// Train RMSE before training followed by one entry per epoch.
    pub rmse_history: Vec<f64>,
    pub final_rmse: f64,
    pub wall_seconds: f64,
    pub converged: bool,
    pub stalled: bool,
    #[serde(skip)]
    pub final_params: Vec<f64>,
}

fn check_finite(loss: f64, epoch: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite { epoch })
    }
}

/// Trains `model` in place on `(samples, targets)`.
pub fn train<M: Trainable>(
    model: &mut M,
    samples: &[M::Sample],
    targets: &[f64],
    config: &TrainConfig,
) -> Result<TrainReport> {
    if samples.len() != targets.len() {
        return Err(shape_err(format!(
            "{} samples but {} targets",
            samples.len(),
            targets.len()
        )));
    }
    let started = Instant::now();
    let mut params = model.params();
    let (loss0, _) = model.loss_and_grad(samples, targets)?;
    let mut history = vec![check_finite(loss0, 0)?.sqrt()];
    let mut converged = false;
    let mut stalled = false;

    let clip = |g: &mut Vec<f64>| {
        if let Some(c) = config.grad_clip {
            g.iter_mut().for_each(|v| *v = v.clamp(-c, c));
        }
    };

    match config.optimizer {
        OptimizerConfig::Adam(adam) => {
            let mut state = AdamState::new(params.len(), adam);
            let mut rng = Rng::new(config.shuffle_seed);
            let mut order: Vec<usize> = (0..samples.len()).collect();
            let batch = config.batch_size.unwrap_or(samples.len()).max(1);
            for epoch in 1..=config.max_epochs {
                if batch < samples.len() {
                    rng.shuffle(&mut order);
                }
                for chunk in order.chunks(batch) {
                    let (loss, mut g) = if chunk.len() == samples.len() {
                        model.loss_and_grad(samples, targets)?
                    } else {
                        let xs: Vec<M::Sample> =
                            chunk.iter().map(|&i| samples[i].clone()).collect();
                        let ts: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
                        model.loss_and_grad(&xs, &ts)?
                    };
                    check_finite(loss, epoch)?;
                    clip(&mut g);
                    state.step(&mut params, &g)?;
                    model.set_params(&params)?;
                }
                let (loss, _) = model.loss_and_grad(samples, targets)?;
                history.push(check_finite(loss, epoch)?.sqrt());
                if plateaued(&history, config) {
                    converged = true;
                    break;
                }
            }
        }
        OptimizerConfig::Lbfgs(lbfgs) => {
            let mut state = LbfgsState::new(lbfgs);
            for epoch in 1..=config.max_epochs {
                let outcome = state.step(
                    |p| {
                        let mut probe = Probe { model: &mut *model };
                        probe.eval(p, samples, targets, &clip)
                    },
                    &mut params,
                )?;
                model.set_params(&params)?;
                if outcome.stalled {
                    stalled = true;
                    break;
                }
                history.push(check_finite(outcome.loss, epoch)?.sqrt());
                if plateaued(&history, config) {
                    converged = true;
                    break;
                }
            }
        }
    }

    model.set_params(&params)?;
    Ok(TrainReport {
        epochs: history.len() - 1,
        final_rmse: *history.last().unwrap(),
        rmse_history: history,
        wall_seconds: started.elapsed().as_secs_f64(),
        converged,
        stalled,
        final_params: params,
    })
}

struct Probe<'a, M> {
    model: &'a mut M,
}

impl<M: Trainable> Probe<'_, M> {
    fn eval(
        &mut self,
        p: &[f64],
        samples: &[M::Sample],
        targets: &[f64],
        clip: &impl Fn(&mut Vec<f64>),
    ) -> Result<(f64, Vec<f64>)> {
        self.model.set_params(p)?;
        let (loss, mut g) = self.model.loss_and_grad(samples, targets)?;
        clip(&mut g);
        Ok((loss, g))
    }
}

fn plateaued(history: &[f64], config: &TrainConfig) -> bool {
    let n = history.len();
    config.window > 0
        && n > config.window
        && history[n - 1 - config.window] - history[n - 1] < config.tol
}
