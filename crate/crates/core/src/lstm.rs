//! Stacked LSTM with a scalar regression head and exact
//! backpropagation-through-time.
//!
//! Each gate acts on the concatenation `[h_{t-1}, x_t]` (hidden state first):
//!
//! ```text
//! i = σ(W_i·[h,x] + b_i)     f = σ(W_f·[h,x] + b_f)
//! o = σ(W_o·[h,x] + b_o)     g = tanh(W_g·[h,x] + b_g)
//! c' = f⊙c + i⊙g             h' = o⊙tanh(c')
//! ```
//!
//! Layer `l`'s hidden-state stream is the input sequence of layer `l + 1`;
//! the head maps the top layer's final hidden state to one value.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, shape_err, Error, Result};
use crate::kan::CHUNK;
use crate::numcore::{sigmoid, Activation, Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCell {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w_i: Matrix,
    pub w_f: Matrix,
    pub w_o: Matrix,
    pub w_g: Matrix,
    pub b_i: Vec<f64>,
    pub b_f: Vec<f64>,
    pub b_o: Vec<f64>,
    pub b_g: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Activations of one cell step, kept for the backward pass.
struct StepCache {
    concat: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    tanh_c: Vec<f64>,
}

impl LstmCell {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Result<Self> {
        let w = || Matrix::zeros(hidden_size, hidden_size + input_size);
        Ok(Self {
            input_size,
            hidden_size,
            w_i: w()?,
            w_f: w()?,
            w_o: w()?,
            w_g: w()?,
            b_i: vec![0.0; hidden_size],
            b_f: vec![0.0; hidden_size],
            b_o: vec![0.0; hidden_size],
            b_g: vec![0.0; hidden_size],
        })
    }

    fn validate(&self) -> Result<()> {
        let shape = (self.hidden_size, self.hidden_size + self.input_size);
        for (name, w) in [
            ("W_i", &self.w_i),
            ("W_f", &self.w_f),
            ("W_o", &self.w_o),
            ("W_g", &self.w_g),
        ] {
            if w.shape() != shape {
                return Err(shape_err(format!(
                    "{name} is {:?}, expected {shape:?}",
                    w.shape()
                )));
            }
        }
        for (name, b) in [
            ("b_i", &self.b_i),
            ("b_f", &self.b_f),
            ("b_o", &self.b_o),
            ("b_g", &self.b_g),
        ] {
            if b.len() != self.hidden_size {
                return Err(shape_err(format!(
                    "{name} has {} entries, expected {}",
                    b.len(),
                    self.hidden_size
                )));
            }
        }
        Ok(())
    }

    fn weights(&self) -> [&Matrix; 4] {
        [&self.w_i, &self.w_f, &self.w_o, &self.w_g]
    }

    fn biases(&self) -> [&Vec<f64>; 4] {
        [&self.b_i, &self.b_f, &self.b_o, &self.b_g]
    }

    fn param_count(&self) -> usize {
        4 * self.hidden_size * (self.hidden_size + self.input_size + 1)
    }

    fn push_params(&self, out: &mut Vec<f64>) {
        for w in self.weights() {
            out.extend_from_slice(w.data());
        }
        for b in self.biases() {
            out.extend_from_slice(b);
        }
    }

    fn load_params(&mut self, p: &[f64]) -> usize {
        let mut off = 0;
        for w in [&mut self.w_i, &mut self.w_f, &mut self.w_o, &mut self.w_g] {
            let n = w.data().len();
            w.data_mut().copy_from_slice(&p[off..off + n]);
            off += n;
        }
        for b in [&mut self.b_i, &mut self.b_f, &mut self.b_o, &mut self.b_g] {
            let n = b.len();
            b.copy_from_slice(&p[off..off + n]);
            off += n;
        }
        off
    }

    fn step_cached(&self, x: &[f64], state: &LstmState) -> (LstmState, StepCache) {
        let hs = self.hidden_size;
        let mut concat = Vec::with_capacity(hs + self.input_size);
        concat.extend_from_slice(&state.h);
        concat.extend_from_slice(x);
        let mut pre = [vec![0.0; hs], vec![0.0; hs], vec![0.0; hs], vec![0.0; hs]];
        for ((w, b), z) in self
            .weights()
            .into_iter()
            .zip(self.biases())
            .zip(pre.iter_mut())
        {
            w.mul_vec_into(&concat, z);
            z.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        let [zi, zf, zo, zg] = pre;
        let i: Vec<f64> = zi.into_iter().map(sigmoid).collect();
        let f: Vec<f64> = zf.into_iter().map(sigmoid).collect();
        let o: Vec<f64> = zo.into_iter().map(sigmoid).collect();
        let g: Vec<f64> = zg.into_iter().map(f64::tanh).collect();
        let c: Vec<f64> = (0..hs).map(|k| f[k] * state.c[k] + i[k] * g[k]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h: Vec<f64> = (0..hs).map(|k| o[k] * tanh_c[k]).collect();
        let cache = StepCache {
            concat,
            c_prev: state.c.clone(),
            i,
            f,
            o,
            g,
            tanh_c,
        };
        (LstmState { h, c }, cache)
    }
}

pub fn cell_step(cell: &LstmCell, x: &[f64], state: &LstmState) -> Result<LstmState> {
    if x.len() != cell.input_size {
        return Err(shape_err(format!(
            "cell expects input of {}, got {}",
            cell.input_size,
            x.len()
        )));
    }
    if state.h.len() != cell.hidden_size || state.c.len() != cell.hidden_size {
        return Err(shape_err(format!(
            "cell expects state of {}, got h={} c={}",
            cell.hidden_size,
            state.h.len(),
            state.c.len()
        )));
    }
    Ok(cell.step_cached(x, state).0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmNetwork {
    cells: Vec<LstmCell>,
    head_weights: Matrix,
    head_bias: f64,
    head_activation: Activation,
}

/// Gradients laid out exactly like the network they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmGradients(pub LstmNetwork);

impl LstmGradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.0.params()
    }
}

impl LstmNetwork {
    pub fn new(
        cells: Vec<LstmCell>,
        head_weights: Matrix,
        head_bias: f64,
        head_activation: Activation,
    ) -> Result<Self> {
        let net = Self {
            cells,
            head_weights,
            head_bias,
            head_activation,
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(input_err("LSTM network needs at least one layer"));
        }
        for c in &self.cells {
            c.validate()?;
        }
        for (a, b) in self.cells.iter().zip(self.cells.iter().skip(1)) {
            if a.hidden_size != b.input_size {
                return Err(shape_err(format!(
                    "LSTM layer of {} units cannot feed a layer expecting {} inputs",
                    a.hidden_size, b.input_size
                )));
            }
        }
        let top = self.cells.last().unwrap().hidden_size;
        if self.head_weights.shape() != (top, 1) {
            return Err(shape_err(format!(
                "head is {:?}, expected ({top}, 1)",
                self.head_weights.shape()
            )));
        }
        if !matches!(self.head_activation, Activation::Linear | Activation::Tanh) {
            return Err(input_err("LSTM head activation must be linear or tanh"));
        }
        Ok(())
    }

    pub fn cells(&self) -> &[LstmCell] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [LstmCell] {
        &mut self.cells
    }

    pub fn head_weights(&self) -> &Matrix {
        &self.head_weights
    }

    pub fn head_bias(&self) -> f64 {
        self.head_bias
    }

    pub fn head_activation(&self) -> Activation {
        self.head_activation
    }

    pub fn input_size(&self) -> usize {
        self.cells[0].input_size
    }

    pub fn param_count(&self) -> usize {
        self.cells.iter().map(LstmCell::param_count).sum::<usize>() + self.head_weights.rows() + 1
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for c in &self.cells {
            c.push_params(&mut out);
        }
        out.extend_from_slice(self.head_weights.data());
        out.push(self.head_bias);
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(shape_err(format!(
                "LSTM network has {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut off = 0;
        for c in &mut self.cells {
            off += c.load_params(&params[off..]);
        }
        let n = self.head_weights.rows();
        self.head_weights
            .data_mut()
            .copy_from_slice(&params[off..off + n]);
        self.head_bias = params[off + n];
        Ok(())
    }

    fn check_sequence(&self, seq: &Matrix) -> Result<()> {
        if seq.cols() != self.input_size() {
            return Err(shape_err(format!(
                "sequence steps have {} features, network expects {}",
                seq.cols(),
                self.input_size()
            )));
        }
        Ok(())
    }

    /// Runs the stack from zero state and returns (head pre-activation,
    /// final top hidden state, per-layer step caches).
    fn unroll(&self, seq: &Matrix) -> (f64, Vec<f64>, Vec<Vec<StepCache>>) {
        let mut caches = Vec::with_capacity(self.cells.len());
        let mut inputs: Vec<Vec<f64>> = (0..seq.rows()).map(|t| seq.row(t).to_vec()).collect();
        for cell in &self.cells {
            let mut state = LstmState::zeros(cell.hidden_size);
            let mut layer_cache = Vec::with_capacity(inputs.len());
            let mut outputs = Vec::with_capacity(inputs.len());
            for x in &inputs {
                let (next, cache) = cell.step_cached(x, &state);
                outputs.push(next.h.clone());
                layer_cache.push(cache);
                state = next;
            }
            caches.push(layer_cache);
            inputs = outputs;
        }
        let h_top = inputs.pop().expect("non-empty sequence");
        let pre = crate::numcore::dot(self.head_weights.data(), &h_top) + self.head_bias;
        (pre, h_top, caches)
    }

    pub fn forward(&self, seq: &Matrix) -> Result<f64> {
        self.check_sequence(seq)?;
        let (pre, _, _) = self.unroll(seq);
        Ok(self.head_activation.apply(pre))
    }

    /// Adds one sample's squared-error gradient into `grads`; returns the
    /// squared error.
    fn accumulate_sample(&self, seq: &Matrix, target: f64, grads: &mut LstmNetwork) -> f64 {
        let (pre, h_top, caches) = self.unroll(seq);
        let y = self.head_activation.apply(pre);
        let err = y - target;
        let dpre = 2.0 * err * self.head_activation.derivative(pre);

        for (gw, h) in grads.head_weights.data_mut().iter_mut().zip(&h_top) {
            *gw += dpre * h;
        }
        grads.head_bias += dpre;

        let steps = seq.rows();
        let top = self.cells.len() - 1;
        let mut dh_above: Vec<Vec<f64>> = vec![vec![0.0; self.cells[top].hidden_size]; steps];
        dh_above[steps - 1] = self.head_weights.data().iter().map(|w| dpre * w).collect();

        for (l, cell) in self.cells.iter().enumerate().rev() {
            let hs = cell.hidden_size;
            let gcell = &mut grads.cells[l];
            let mut dh_next = vec![0.0; hs];
            let mut dc_next = vec![0.0; hs];
            let mut dx = vec![vec![0.0; cell.input_size]; steps];
            for t in (0..steps).rev() {
                let sc = &caches[l][t];
                let mut dz = [vec![0.0; hs], vec![0.0; hs], vec![0.0; hs], vec![0.0; hs]];
                for k in 0..hs {
                    let dh = dh_above[t][k] + dh_next[k];
                    let d_o = dh * sc.tanh_c[k];
                    let dc = dh * sc.o[k] * (1.0 - sc.tanh_c[k] * sc.tanh_c[k]) + dc_next[k];
                    let di = dc * sc.g[k];
                    let dg = dc * sc.i[k];
                    let df = dc * sc.c_prev[k];
                    dc_next[k] = dc * sc.f[k];
                    dz[0][k] = di * sc.i[k] * (1.0 - sc.i[k]);
                    dz[1][k] = df * sc.f[k] * (1.0 - sc.f[k]);
                    dz[2][k] = d_o * sc.o[k] * (1.0 - sc.o[k]);
                    dz[3][k] = dg * (1.0 - sc.g[k] * sc.g[k]);
                }
                let mut dconcat = vec![0.0; sc.concat.len()];
                let gws = [
                    &mut gcell.w_i,
                    &mut gcell.w_f,
                    &mut gcell.w_o,
                    &mut gcell.w_g,
                ];
                let gbs = [
                    &mut gcell.b_i,
                    &mut gcell.b_f,
                    &mut gcell.b_o,
                    &mut gcell.b_g,
                ];
                for (((gw, gb), w), dzg) in gws.into_iter().zip(gbs).zip(cell.weights()).zip(&dz) {
                    for k in 0..hs {
                        let d = dzg[k];
                        if d == 0.0 {
                            continue;
                        }
                        gb[k] += d;
                        for ((gwv, &cv), (dcv, &wv)) in gw
                            .row_mut(k)
                            .iter_mut()
                            .zip(&sc.concat)
                            .zip(dconcat.iter_mut().zip(w.row(k)))
                        {
                            *gwv += d * cv;
                            *dcv += d * wv;
                        }
                    }
                }
                dh_next.copy_from_slice(&dconcat[..hs]);
                dx[t].copy_from_slice(&dconcat[hs..]);
            }
            dh_above = dx;
        }
        err * err
    }

    fn zeroed(&self) -> LstmNetwork {
        let mut z = self.clone();
        let n = z.param_count();
        z.set_params(&vec![0.0; n]).expect("same layout");
        z
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: LstmNetwork = serde_json::from_str(text)?;
        net.validate()
            .map_err(|e| Error::Config(format!("invalid LSTM checkpoint: {e}")))?;
        Ok(net)
    }
}

impl crate::optim::Trainable for LstmNetwork {
    type Sample = Matrix;

    fn params(&self) -> Vec<f64> {
        LstmNetwork::params(self)
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        LstmNetwork::set_params(self, params)
    }

    fn predict(&self, sample: &Matrix) -> Result<f64> {
        self.forward(sample)
    }

    fn loss_and_grad(&self, samples: &[Matrix], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (loss, g) = lstm_backward(self, samples, targets)?;
        Ok((loss, g.flatten()))
    }
}

pub fn lstm_forward(net: &LstmNetwork, sequence: &[Vec<f64>]) -> Result<f64> {
    if sequence.is_empty() {
        return Err(input_err("empty sequence"));
    }
    net.forward(&Matrix::from_rows(sequence)?)
}

/// Mean squared error over a batch of equal-length sequences with its exact
/// gradient, computed by backpropagation through time.
pub fn lstm_backward(
    net: &LstmNetwork,
    sequences: &[Matrix],
    targets: &[f64],
) -> Result<(f64, LstmGradients)> {
    if sequences.is_empty() {
        return Err(input_err("empty batch"));
    }
    if sequences.len() != targets.len() {
        return Err(shape_err(format!(
            "{} sequences but {} targets",
            sequences.len(),
            targets.len()
        )));
    }
    let len = sequences[0].rows();
    if sequences.iter().any(|s| s.rows() != len) {
        return Err(input_err("ragged batch: sequences differ in length"));
    }
    for s in sequences {
        net.check_sequence(s)?;
    }
    let partials: Vec<(f64, LstmNetwork)> = sequences
        .par_chunks(CHUNK)
        .zip(targets.par_chunks(CHUNK))
        .map(|(xs, ts)| {
            let mut g = net.zeroed();
            let sse = xs
                .iter()
                .zip(ts)
                .map(|(x, &t)| net.accumulate_sample(x, t, &mut g))
                .sum();
            (sse, g)
        })
        .collect();
    let n = sequences.len() as f64;
    let mut total = vec![0.0; net.param_count()];
    let mut sse = 0.0;
    for (s, g) in partials {
        sse += s;
        total.iter_mut().zip(g.params()).for_each(|(a, b)| *a += b);
    }
    total.iter_mut().for_each(|v| *v /= n);
    let mut grads = net.zeroed();
    grads.set_params(&total)?;
    Ok((sse / n, LstmGradients(grads)))
}

fn glorot(
    rng: &mut Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
) -> Result<Matrix> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.uniform_range(-limit, limit))
            .collect(),
    )
}

/// Glorot-uniform gate weights, zero biases except the forget gate (1.0),
/// Glorot-uniform head and zero head bias.
pub fn lstm_init(
    layer_sizes: &[usize],
    input_size: usize,
    head_activation: Activation,
    rng: &mut Rng,
) -> Result<LstmNetwork> {
    if layer_sizes.is_empty() || layer_sizes.contains(&0) || input_size == 0 {
        return Err(input_err(format!(
            "LSTM sizes must be positive, got layers {layer_sizes:?} and input {input_size}"
        )));
    }
    let mut cells = Vec::with_capacity(layer_sizes.len());
    let mut inp = input_size;
    for &hs in layer_sizes {
        let fan_in = hs + inp;
        let mut cell = LstmCell::zeros(inp, hs)?;
        cell.w_i = glorot(rng, hs, fan_in, fan_in, hs)?;
        cell.w_f = glorot(rng, hs, fan_in, fan_in, hs)?;
        cell.w_o = glorot(rng, hs, fan_in, fan_in, hs)?;
        cell.w_g = glorot(rng, hs, fan_in, fan_in, hs)?;
        cell.b_f = vec![1.0; hs];
        cells.push(cell);
        inp = hs;
    }
    let head = glorot(rng, inp, 1, inp, 1)?;
    LstmNetwork::new(cells, head, 0.0, head_activation)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar-loop cell step written directly from the gate equations.
    fn naive_step(cell: &LstmCell, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hs = cell.hidden_size;
        let mut h2 = vec![0.0; hs];
        let mut c2 = vec![0.0; hs];
        for k in 0..hs {
            let mut z = [cell.b_i[k], cell.b_f[k], cell.b_o[k], cell.b_g[k]];
            for (gate, w) in [&cell.w_i, &cell.w_f, &cell.w_o, &cell.w_g]
                .into_iter()
                .enumerate()
            {
                for j in 0..hs {
                    z[gate] += w.get(k, j) * h[j];
                }
                for j in 0..cell.input_size {
                    z[gate] += w.get(k, hs + j) * x[j];
                }
            }
            let s = |v: f64| 1.0 / (1.0 + (-v).exp());
            c2[k] = s(z[1]) * c[k] + s(z[0]) * z[3].tanh();
            h2[k] = s(z[2]) * c2[k].tanh();
        }
        (h2, c2)
    }

    fn seq(rng: &mut Rng, len: usize, dim: usize) -> Matrix {
        Matrix::from_vec(
            len,
            dim,
            (0..len * dim)
                .map(|_| rng.uniform_range(-1.0, 1.0))
                .collect(),
        )
        .unwrap()
    }

    fn randomize(net: &mut LstmNetwork, rng: &mut Rng) {
        let p: Vec<f64> = (0..net.param_count())
            .map(|_| rng.uniform_range(-0.8, 0.8))
            .collect();
        net.set_params(&p).unwrap();
    }

    #[test]
    fn zero_cell_step() {
        let cell = LstmCell::zeros(3, 2).unwrap();
        let s = cell_step(&cell, &[0.3, -0.2, 0.9], &LstmState::zeros(2)).unwrap();
        assert_eq!(s.h, vec![0.0, 0.0]);
        assert_eq!(s.c, vec![0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut cell = LstmCell::zeros(2, 3).unwrap();
        cell.b_f = vec![50.0; 3];
        let state = LstmState {
            h: vec![0.1, -0.4, 0.2],
            c: vec![0.7, -1.3, 2.0],
        };
        let next = cell_step(&cell, &[0.5, 0.5], &state).unwrap();
        for (a, b) in next.c.iter().zip(&state.c) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_matches_scalar_oracle() {
        let mut rng = Rng::new(3);
        let mut net = lstm_init(&[2], 3, Activation::Linear, &mut rng).unwrap();
        randomize(&mut net, &mut rng);
        let cell = &net.cells()[0];
        let x = [0.2, -0.7, 0.4];
        let state = LstmState {
            h: vec![0.3, -0.1],
            c: vec![-0.5, 0.8],
        };
        let got = cell_step(cell, &x, &state).unwrap();
        let (h, c) = naive_step(cell, &x, &state.h, &state.c);
        for k in 0..2 {
            assert!((got.h[k] - h[k]).abs() < 1e-12);
            assert!((got.c[k] - c[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_rejects_bad_shapes() {
        let cell = LstmCell::zeros(3, 2).unwrap();
        assert!(matches!(
            cell_step(&cell, &[0.0; 2], &LstmState::zeros(2)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            cell_step(&cell, &[0.0; 3], &LstmState::zeros(3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn forward_matches_manual_unroll() {
        let mut rng = Rng::new(12);
        let mut net = lstm_init(&[3], 2, Activation::Linear, &mut rng).unwrap();
        randomize(&mut net, &mut rng);
        let s = seq(&mut rng, 4, 2);
        let cell = &net.cells()[0];
        let (mut h, mut c) = (vec![0.0; 3], vec![0.0; 3]);
        for t in 0..4 {
            (h, c) = naive_step(cell, s.row(t), &h, &c);
        }
        let manual: f64 = (0..3)
            .map(|k| net.head_weights().get(k, 0) * h[k])
            .sum::<f64>()
            + net.head_bias();
        assert!((net.forward(&s).unwrap() - manual).abs() < 1e-12);
    }

    #[test]
    fn zero_network_and_purity() {
        let mut rng = Rng::new(1);
        let mut net = lstm_init(&[4, 3], 2, Activation::Tanh, &mut rng).unwrap();
        let s = seq(&mut rng, 6, 2);
        let a = net.forward(&s).unwrap();
        assert_eq!(a, net.forward(&s).unwrap());
        let n = net.param_count();
        net.set_params(&vec![0.0; n]).unwrap();
        assert_eq!(net.forward(&s).unwrap(), 0.0);
        assert!(lstm_forward(&net, &[]).is_err());
    }

    fn check_gradients(net: &mut LstmNetwork, seqs: &[Matrix], ts: &[f64]) {
        let h = 1e-5;
        let (_, g) = lstm_backward(net, seqs, ts).unwrap();
        let analytic = g.flatten();
        let p0 = net.params();
        for idx in 0..p0.len() {
            let mut p = p0.clone();
            p[idx] += h;
            net.set_params(&p).unwrap();
            let up = lstm_backward(net, seqs, ts).unwrap().0;
            p[idx] -= 2.0 * h;
            net.set_params(&p).unwrap();
            let down = lstm_backward(net, seqs, ts).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            let a = analytic[idx];
            let scale = a.abs().max(fd.abs());
            let ok = if scale < 1e-8 {
                (a - fd).abs() < 1e-8
            } else {
                (a - fd).abs() / scale < 1e-4
            };
            assert!(ok, "param {idx}: analytic {a} vs fd {fd}");
        }
        net.set_params(&p0).unwrap();
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = Rng::new(40 + seed);
            let mut net = lstm_init(&[4], 2, Activation::Linear, &mut rng).unwrap();
            randomize(&mut net, &mut rng);
            let seqs: Vec<Matrix> = (0..8).map(|_| seq(&mut rng, 5, 2)).collect();
            let ts: Vec<f64> = (0..8).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            check_gradients(&mut net, &seqs, &ts);
        }
    }

    #[test]
    fn stacked_tanh_gradients_match_finite_differences() {
        let mut rng = Rng::new(99);
        let mut net = lstm_init(&[3, 2], 2, Activation::Tanh, &mut rng).unwrap();
        randomize(&mut net, &mut rng);
        let seqs: Vec<Matrix> = (0..4).map(|_| seq(&mut rng, 4, 2)).collect();
        let ts: Vec<f64> = (0..4).map(|_| rng.uniform_range(-0.5, 0.5)).collect();
        check_gradients(&mut net, &seqs, &ts);
    }

    #[test]
    fn perfect_fit_and_order_invariance() {
        let mut rng = Rng::new(5);
        let net = lstm_init(&[3], 2, Activation::Linear, &mut rng).unwrap();
        let seqs: Vec<Matrix> = (0..6).map(|_| seq(&mut rng, 3, 2)).collect();
        let ts: Vec<f64> = seqs.iter().map(|s| net.forward(s).unwrap()).collect();
        let (loss, g) = lstm_backward(&net, &seqs, &ts).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flatten().iter().all(|&v| v == 0.0));

        let noisy: Vec<f64> = ts.iter().map(|t| t + 0.3).collect();
        let (_, g1) = lstm_backward(&net, &seqs, &noisy).unwrap();
        let rev_s: Vec<Matrix> = seqs.iter().rev().cloned().collect();
        let rev_t: Vec<f64> = noisy.iter().rev().copied().collect();
        let (_, g2) = lstm_backward(&net, &rev_s, &rev_t).unwrap();
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn ragged_batch_rejected() {
        let mut rng = Rng::new(5);
        let net = lstm_init(&[3], 2, Activation::Linear, &mut rng).unwrap();
        let seqs = vec![seq(&mut rng, 3, 2), seq(&mut rng, 4, 2)];
        assert!(matches!(
            lstm_backward(&net, &seqs, &[0.0, 0.0]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn init_contract() {
        let a = lstm_init(&[10], 6, Activation::Tanh, &mut Rng::new(7)).unwrap();
        let b = lstm_init(&[10], 6, Activation::Tanh, &mut Rng::new(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cells()[0].w_i.shape(), (10, 16));
        assert!(a.cells()[0].b_f.iter().all(|&v| v == 1.0));
        assert!(a.cells()[0].b_i.iter().all(|&v| v == 0.0));
        assert!(lstm_init(&[0], 6, Activation::Tanh, &mut Rng::new(7)).is_err());
        assert!(lstm_init(&[4], 6, Activation::Silu, &mut Rng::new(7)).is_err());
    }

    #[test]
    fn states_stay_finite_over_long_runs() {
        let mut rng = Rng::new(8);
        let mut net = lstm_init(&[6], 3, Activation::Linear, &mut rng).unwrap();
        randomize(&mut net, &mut rng);
        let cell = &net.cells()[0];
        let mut state = LstmState::zeros(6);
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..3).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            state = cell_step(cell, &x, &state).unwrap();
            assert!(state.h.iter().chain(&state.c).all(|v| v.is_finite()));
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = Rng::new(2);
        let mut net = lstm_init(&[5, 3], 4, Activation::Tanh, &mut rng).unwrap();
        randomize(&mut net, &mut rng);
        assert_eq!(
            LstmNetwork::from_json(&net.to_json().unwrap()).unwrap(),
            net
        );
    }
}
