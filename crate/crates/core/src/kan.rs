//! Kolmogorov-Arnold networks with learnable B-spline edge activations.
//!
//! Every edge `(j, i)` of a layer carries `w[j,i]·silu(x_i) + spline[j,i](x_i)`
//! and node `j` sums its incoming edges. Parameters are stored flat per
//! layer: coefficients in `[out][in][basis]` order, then base weights in
//! `[out][in]` order. That is also the order of the flat parameter view
//! used by the optimizers and of [`KanGradients::flatten`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bspline::{SplineFunction, SplineSpec};
use crate::error::{input_err, shape_err, Error, Result};
use crate::numcore::{silu, silu_derivative, Rng};

/// Samples per parallel work unit. Partial sums are combined in chunk order,
/// so results do not depend on the number of threads.
pub(crate) const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KanLayer {
    in_dim: usize,
    out_dim: usize,
    spec: SplineSpec,
    coefficients: Vec<f64>,
    base_weights: Vec<f64>,
}

/// Per-input cache of everything the backward pass needs.
struct InputCache {
    start: usize,
    basis: Vec<f64>,
    basis_grad: Vec<f64>,
    silu: f64,
    silu_grad: f64,
}

impl KanLayer {
    pub fn new(
        spec: SplineSpec,
        in_dim: usize,
        out_dim: usize,
        coefficients: Vec<f64>,
        base_weights: Vec<f64>,
    ) -> Result<Self> {
        let layer = Self {
            in_dim,
            out_dim,
            spec,
            coefficients,
            base_weights,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn zeros(spec: SplineSpec, in_dim: usize, out_dim: usize) -> Result<Self> {
        let nb = spec.basis_count();
        Self::new(
            spec,
            in_dim,
            out_dim,
            vec![0.0; out_dim * in_dim * nb],
            vec![0.0; out_dim * in_dim],
        )
    }

    fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(input_err("KAN layer dimensions must be positive"));
        }
        let edges = self.in_dim * self.out_dim;
        if self.coefficients.len() != edges * self.spec.basis_count()
            || self.base_weights.len() != edges
        {
            return Err(shape_err(format!(
                "KAN layer {}->{} expects {} coefficients and {} base weights, got {} and {}",
                self.in_dim,
                self.out_dim,
                edges * self.spec.basis_count(),
                edges,
                self.coefficients.len(),
                self.base_weights.len()
            )));
        }
        if self
            .coefficients
            .iter()
            .chain(&self.base_weights)
            .any(|v| !v.is_finite())
        {
            return Err(input_err("KAN layer parameters must be finite"));
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn spec(&self) -> &SplineSpec {
        &self.spec
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn coefficients_mut(&mut self) -> &mut [f64] {
        &mut self.coefficients
    }

    pub fn base_weights(&self) -> &[f64] {
        &self.base_weights
    }

    pub fn base_weights_mut(&mut self) -> &mut [f64] {
        &mut self.base_weights
    }

    pub fn base_weight(&self, out: usize, inp: usize) -> f64 {
        self.base_weights[out * self.in_dim + inp]
    }

    fn edge_coefficients(&self, out: usize, inp: usize) -> &[f64] {
        let nb = self.spec.basis_count();
        let off = (out * self.in_dim + inp) * nb;
        &self.coefficients[off..off + nb]
    }

    /// The spline on edge `inp -> out` as a standalone function.
    pub fn edge_spline(&self, out: usize, inp: usize) -> SplineFunction {
        SplineFunction::new(self.spec, self.edge_coefficients(out, inp).to_vec())
            .expect("layer invariants hold")
    }

    pub fn param_count(&self) -> usize {
        self.coefficients.len() + self.base_weights.len()
    }

    fn cache_inputs(&self, x: &[f64], with_grad: bool) -> Result<Vec<InputCache>> {
        let k = self.spec.degree;
        x.iter()
            .map(|&xi| {
                let mut basis = vec![0.0; k + 1];
                let mut basis_grad = Vec::new();
                let start = if with_grad {
                    basis_grad = vec![0.0; k + 1];
                    self.spec
                        .local_basis_grad(xi, &mut basis, &mut basis_grad)?
                } else {
                    self.spec.local_basis(xi, &mut basis, None)?
                };
                Ok(InputCache {
                    start,
                    basis,
                    basis_grad,
                    silu: silu(xi),
                    silu_grad: if with_grad { silu_derivative(xi) } else { 0.0 },
                })
            })
            .collect()
    }

    fn outputs(&self, cache: &[InputCache]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|j| {
                cache
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        let coef = &self.edge_coefficients(j, i)[c.start..c.start + c.basis.len()];
                        let spline: f64 = coef.iter().zip(&c.basis).map(|(a, b)| a * b).sum();
                        self.base_weight(j, i) * c.silu + spline
                    })
                    .sum()
            })
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(shape_err(format!(
                "KAN layer expects {} inputs, got {}",
                self.in_dim,
                x.len()
            )));
        }
        let cache = self.cache_inputs(x, false)?;
        Ok(self.outputs(&cache))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KanNetwork {
    layers: Vec<KanLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub coefficients: Vec<f64>,
    pub base_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KanGradients {
    pub layers: Vec<LayerGradients>,
}

impl KanGradients {
    fn zeros_like(net: &KanNetwork) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradients {
                    coefficients: vec![0.0; l.coefficients.len()],
                    base_weights: vec![0.0; l.base_weights.len()],
                })
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.coefficients
                .iter_mut()
                .zip(&b.coefficients)
                .for_each(|(x, y)| *x += y);
            a.base_weights
                .iter_mut()
                .zip(&b.base_weights)
                .for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.coefficients
                .iter_mut()
                .chain(l.base_weights.iter_mut())
                .for_each(|v| *v *= s);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.coefficients.iter().chain(&l.base_weights).copied())
            .collect()
    }
}

impl KanNetwork {
    pub fn new(layers: Vec<KanLayer>) -> Result<Self> {
        let net = Self { layers };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(input_err("KAN network needs at least one layer"));
        }
        for l in &self.layers {
            l.validate()?;
        }
        for (a, b) in self.layers.iter().zip(self.layers.iter().skip(1)) {
            if a.out_dim != b.in_dim {
                return Err(shape_err(format!(
                    "KAN layer output {} does not feed next layer input {}",
                    a.out_dim, b.in_dim
                )));
            }
        }
        if self.layers.last().map(KanLayer::out_dim) != Some(1) {
            return Err(shape_err("KAN network must end in a single output"));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[KanLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [KanLayer] {
        &mut self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].in_dim)
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(KanLayer::param_count).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.coefficients.iter().chain(&l.base_weights).copied())
            .collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(shape_err(format!(
                "KAN network has {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nc = l.coefficients.len();
            l.coefficients.copy_from_slice(&params[off..off + nc]);
            off += nc;
            let nw = l.base_weights.len();
            l.base_weights.copy_from_slice(&params[off..off + nw]);
            off += nw;
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_dim() {
            return Err(shape_err(format!(
                "KAN network expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(input_err("KAN input must be finite"));
        }
        let mut a = x.to_vec();
        for l in &self.layers {
            a = l.forward(&a)?;
        }
        Ok(a[0])
    }

    /// Adds the gradient of one sample's squared error into `grads` and
    /// returns that squared error.
    fn accumulate_sample(&self, x: &[f64], target: f64, grads: &mut KanGradients) -> Result<f64> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        for l in &self.layers {
            let cache = l.cache_inputs(&a, true)?;
            a = l.outputs(&cache);
            caches.push(cache);
        }
        let err = a[0] - target;
        let mut delta = vec![2.0 * err];
        for (li, l) in self.layers.iter().enumerate().rev() {
            let cache = &caches[li];
            let g = &mut grads.layers[li];
            let nb = l.spec.basis_count();
            let mut upstream = vec![0.0; l.in_dim];
            for (j, &dj) in delta.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                for (i, c) in cache.iter().enumerate() {
                    let edge = j * l.in_dim + i;
                    let off = edge * nb + c.start;
                    let coef = &l.coefficients[off..off + c.basis.len()];
                    let gcoef = &mut g.coefficients[off..off + c.basis.len()];
                    let mut dspline = 0.0;
                    for r in 0..c.basis.len() {
                        gcoef[r] += dj * c.basis[r];
                        dspline += coef[r] * c.basis_grad[r];
                    }
                    g.base_weights[edge] += dj * c.silu;
                    upstream[i] += dj * (l.base_weights[edge] * c.silu_grad + dspline);
                }
            }
            delta = upstream;
        }
        Ok(err * err)
    }
}

pub fn kan_forward(net: &KanNetwork, x: &[f64]) -> Result<f64> {
    net.forward(x)
}

/// Mean squared error over the batch and its exact gradient with respect to
/// every spline coefficient and base weight.
pub fn kan_backward(
    net: &KanNetwork,
    inputs: &[Vec<f64>],
    targets: &[f64],
) -> Result<(f64, KanGradients)> {
    if inputs.is_empty() {
        return Err(input_err("empty batch"));
    }
    if inputs.len() != targets.len() {
        return Err(shape_err(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if let Some(bad) = inputs.iter().find(|x| x.len() != net.input_dim()) {
        return Err(shape_err(format!(
            "KAN network expects {} inputs, got {}",
            net.input_dim(),
            bad.len()
        )));
    }
    let partials: Vec<Result<(f64, KanGradients)>> = inputs
        .par_chunks(CHUNK)
        .zip(targets.par_chunks(CHUNK))
        .map(|(xs, ts)| {
            let mut g = KanGradients::zeros_like(net);
            let mut sse = 0.0;
            for (x, &t) in xs.iter().zip(ts) {
                sse += net.accumulate_sample(x, t, &mut g)?;
            }
            Ok((sse, g))
        })
        .collect();
    let mut grads = KanGradients::zeros_like(net);
    let mut sse = 0.0;
    for p in partials {
        let (s, g) = p?;
        sse += s;
        grads.add_assign(&g);
    }
    let n = inputs.len() as f64;
    grads.scale(1.0 / n);
    Ok((sse / n, grads))
}

/// Random network with the given layer widths. Spline coefficients are drawn
/// from N(0, 0.1²) and base weights from N(0, 1/in_dim).
pub fn kan_init(dims: &[usize], spec: SplineSpec, rng: &mut Rng) -> Result<KanNetwork> {
    let specs = vec![spec; dims.len().saturating_sub(1)];
    kan_init_with_specs(dims, &specs, rng)
}

/// Like [`kan_init`] with one spline spec per layer.
pub fn kan_init_with_specs(
    dims: &[usize],
    specs: &[SplineSpec],
    rng: &mut Rng,
) -> Result<KanNetwork> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(input_err(format!(
            "KAN dims must have at least two positive entries, got {dims:?}"
        )));
    }
    if *dims.last().unwrap() != 1 {
        return Err(input_err(format!("KAN dims must end in 1, got {dims:?}")));
    }
    if specs.len() != dims.len() - 1 {
        return Err(input_err(format!(
            "{} spline specs for {} layers",
            specs.len(),
            dims.len() - 1
        )));
    }
    let layers = dims
        .windows(2)
        .zip(specs)
        .map(|(w, &spec)| {
            spec.validate()?;
            let nb = spec.basis_count();
            let (n, m) = (w[0], w[1]);
            let base_std = 1.0 / (n as f64).sqrt();
            let coefficients = (0..m * n * nb)
                .map(|_| 0.1 * rng.standard_normal())
                .collect();
            let base_weights = (0..m * n)
                .map(|_| base_std * rng.standard_normal())
                .collect();
            KanLayer::new(spec, n, m, coefficients, base_weights)
        })
        .collect::<Result<Vec<_>>>()?;
    KanNetwork::new(layers)
}

impl crate::optim::Trainable for KanNetwork {
    type Sample = Vec<f64>;

    fn params(&self) -> Vec<f64> {
        KanNetwork::params(self)
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        KanNetwork::set_params(self, params)
    }

    fn predict(&self, sample: &Vec<f64>) -> Result<f64> {
        self.forward(sample)
    }

    fn loss_and_grad(&self, samples: &[Vec<f64>], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (loss, g) = kan_backward(self, samples, targets)?;
        Ok((loss, g.flatten()))
    }
}

impl KanNetwork {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: KanNetwork = serde_json::from_str(text)?;
        net.validate()
            .map_err(|e| Error::Config(format!("invalid KAN checkpoint: {e}")))?;
        Ok(net)
    }
}
