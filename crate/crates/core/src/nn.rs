//! Feedforward network with hand-written backpropagation.
//!
//! Parameters are stored flat, layer by layer: the `out x in` weight matrix in
//! row-major order followed by the `out` biases. Hidden layers use ReLU; the
//! output head is either a sigmoid (binary classifier trained with BCE) or the
//! identity (regressor trained with squared error, used for the APL surrogates).

use std::ops::{Deref, DerefMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Flattened weights and biases of an [`Mlp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ParamVector, scale: f64) -> Result<()> {
        if other.len() != self.len() {
            return Err(shape_err("parameter vector", self.len(), other.len()));
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Sigmoid,
    Identity,
}

/// On-disk checkpoint layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    layer_sizes: Vec<usize>,
    hidden_activation: HiddenActivation,
    output_activation: OutputHead,
    params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Checkpoint", into = "Checkpoint")]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    head: OutputHead,
    params: ParamVector,
}

impl TryFrom<Checkpoint> for Mlp {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        let mut m = Mlp::zeros(&c.layer_sizes, c.output_activation)?;
        m.set_params(ParamVector::new(c.params))?;
        Ok(m)
    }
}

impl From<Mlp> for Checkpoint {
    fn from(m: Mlp) -> Self {
        Checkpoint {
            layer_sizes: m.layer_sizes,
            hidden_activation: HiddenActivation::Relu,
            output_activation: m.head,
            params: m.params.into_inner(),
        }
    }
}

pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

fn check_architecture(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::InvalidArchitecture(format!(
            "need at least an input and an output size, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.iter().any(|&s| s == 0) {
        return Err(Error::InvalidArchitecture(format!(
            "all layer sizes must be >= 1, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy over the outputs of one example.
pub fn loss_bce(pred: &[f64], y: &[f64]) -> Result<f64> {
    if pred.len() != y.len() {
        return Err(shape_err("bce labels", pred.len(), y.len()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .iter()
        .zip(y)
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Per-layer activations of one forward pass; `acts[0]` is the input.
struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Mlp {
    /// Builds a network with He-scaled normal weights and zero biases.
    pub fn new(layer_sizes: &[usize], head: OutputHead, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(layer_sizes, head)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..m.num_layers() {
            let (fan_in, fan_out) = (m.layer_sizes[l], m.layer_sizes[l + 1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .expect("finite positive std");
            let (w_off, _) = m.layer_offsets(l);
            for w in &mut m.params[w_off..w_off + fan_in * fan_out] {
                *w = normal.sample(&mut rng);
            }
        }
        Ok(m)
    }

    pub fn zeros(layer_sizes: &[usize], head: OutputHead) -> Result<Self> {
        check_architecture(layer_sizes)?;
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            head,
            params: ParamVector::zeros(param_count(layer_sizes)),
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated architecture")
    }

    /// Number of weight layers.
    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(shape_err("parameter vector", self.params.len(), params.len()));
        }
        self.params = params;
        Ok(())
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        let mut m = self.clone();
        m.set_params(params)?;
        Ok(m)
    }

    /// Offsets of layer `l`'s weight block and bias block inside the flat vector.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let off = param_count(&self.layer_sizes[..=l]);
        let w = off;
        (w, w + self.layer_sizes[l] * self.layer_sizes[l + 1])
    }

    /// Row-major `out x in` weights of layer `l`.
    pub fn weights(&self, l: usize) -> &[f64] {
        let (w, b) = self.layer_offsets(l);
        &self.params[w..b]
    }

    pub fn biases(&self, l: usize) -> &[f64] {
        let (_, b) = self.layer_offsets(l);
        &self.params[b..b + self.layer_sizes[l + 1]]
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.layer_sizes.len());
        acts.push(x.to_vec());
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = self.weights(l);
            let b = self.biases(l);
            let input = &acts[l];
            let mut out = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = b[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                out.push(if l < last { z.max(0.0) } else { z });
            }
            acts.push(out);
        }
        Trace { acts }
    }

    /// Pre-activation of the output layer.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(shape_err("network input", self.input_dim(), x.len()));
        }
        Ok(self.trace(x).acts.pop().expect("non-empty trace"))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.logits(x)?;
        if self.head == OutputHead::Sigmoid {
            z.iter_mut().for_each(|v| *v = sigmoid(*v));
        }
        Ok(z)
    }

    /// Forward pass over every row of `x`.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(x.rows(), self.output_dim());
        for (i, row) in x.iter_rows().enumerate() {
            out.row_mut(i).copy_from_slice(&self.forward(row)?);
        }
        Ok(out)
    }

    /// Scalar convenience for single-output networks.
    pub fn forward_scalar(&self, x: &[f64]) -> Result<f64> {
        if self.output_dim() != 1 {
            return Err(Error::Contract(format!(
                "scalar output required, network has {} outputs",
                self.output_dim()
            )));
        }
        Ok(self.forward(x)?[0])
    }

    /// Per-example loss implied by the head: BCE for sigmoid, squared error for identity.
    fn example_loss_and_delta(&self, logits: &[f64], y: &[f64], delta: &mut [f64]) -> f64 {
        let q = logits.len() as f64;
        let mut loss = 0.0;
        match self.head {
            OutputHead::Sigmoid => {
                for ((d, &z), &t) in delta.iter_mut().zip(logits).zip(y) {
                    let p = sigmoid(z);
                    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                    loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
                    *d = if pc == p { (p - t) / q } else { 0.0 };
                }
            }
            OutputHead::Identity => {
                for ((d, &z), &t) in delta.iter_mut().zip(logits).zip(y) {
                    let r = z - t;
                    loss += r * r;
                    *d = 2.0 * r / q;
                }
            }
        }
        loss / q
    }

    fn check_batch(&self, x: &Matrix, y: &Matrix) -> Result<()> {
        if x.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if x.cols() != self.input_dim() {
            return Err(shape_err("batch features", self.input_dim(), x.cols()));
        }
        if y.cols() != self.output_dim() {
            return Err(shape_err("batch targets", self.output_dim(), y.cols()));
        }
        if y.rows() != x.rows() {
            return Err(shape_err("batch rows", x.rows(), y.rows()));
        }
        Ok(())
    }

    /// Mean per-example loss over a batch.
    pub fn loss(&self, x: &Matrix, y: &Matrix) -> Result<f64> {
        self.check_batch(x, y)?;
        let mut delta = vec![0.0; self.output_dim()];
        let total: f64 = x
            .iter_rows()
            .zip(y.iter_rows())
            .map(|(xr, yr)| {
                let tr = self.trace(xr);
                self.example_loss_and_delta(tr.acts.last().unwrap(), yr, &mut delta)
            })
            .sum();
        Ok(total / x.rows() as f64)
    }

    /// Accumulates `scale * d(output pre-activation . delta)/d(params)` into `grad`,
    /// and optionally writes the input gradient.
    fn backprop(&self, tr: &Trace, delta: &[f64], scale: f64, grad: Option<&mut [f64]>, d_input: Option<&mut [f64]>) {
        let mut grad = grad;
        let mut upstream: Vec<f64> = delta.iter().map(|d| d * scale).collect();
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let input = &tr.acts[l];
            if let Some(g) = grad.as_deref_mut() {
                let (w_off, b_off) = self.layer_offsets(l);
                for o in 0..n_out {
                    let u = upstream[o];
                    if u == 0.0 {
                        continue;
                    }
                    let row = &mut g[w_off + o * n_in..w_off + (o + 1) * n_in];
                    for (gw, &a) in row.iter_mut().zip(input) {
                        *gw += u * a;
                    }
                    g[b_off + o] += u;
                }
            }
            if l == 0 && d_input.is_none() {
                break;
            }
            let w = self.weights(l);
            let mut down = vec![0.0; n_in];
            for o in 0..n_out {
                let u = upstream[o];
                if u == 0.0 {
                    continue;
                }
                for (d, &wv) in down.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *d += u * wv;
                }
            }
            if l > 0 {
                // ReLU gate: the stored activation is positive iff the unit was active.
                for (d, &a) in down.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            upstream = down;
        }
        if let Some(di) = d_input {
            di.copy_from_slice(&upstream);
        }
    }

    /// Gradient of the mean batch loss, plus `extra` when given.
    pub fn backward(&self, x: &Matrix, y: &Matrix, extra: Option<&ParamVector>) -> Result<ParamVector> {
        self.check_batch(x, y)?;
        let mut grad = ParamVector::zeros(self.num_params());
        let mut delta = vec![0.0; self.output_dim()];
        let scale = 1.0 / x.rows() as f64;
        for (xr, yr) in x.iter_rows().zip(y.iter_rows()) {
            let tr = self.trace(xr);
            self.example_loss_and_delta(tr.acts.last().unwrap(), yr, &mut delta);
            self.backprop(&tr, &delta, scale, Some(&mut grad), None);
        }
        if let Some(e) = extra {
            grad.add_scaled(e, 1.0)?;
        }
        Ok(grad)
    }

    /// Derivative of the scalar output with respect to the input vector.
    pub fn grad_wrt_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.output_dim() != 1 {
            return Err(Error::Contract(format!(
                "input gradient needs a scalar output, network has {}",
                self.output_dim()
            )));
        }
        if x.len() != self.input_dim() {
            return Err(shape_err("network input", self.input_dim(), x.len()));
        }
        let tr = self.trace(x);
        let z = tr.acts.last().unwrap()[0];
        let d_head = match self.head {
            OutputHead::Identity => 1.0,
            OutputHead::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        };
        let mut out = vec![0.0; x.len()];
        self.backprop(&tr, &[d_head], 1.0, None, Some(&mut out));
        Ok(out)
    }
}

/// Adam optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, model: &mut Mlp, grad: &ParamVector) -> Result<()> {
        self.step_params(model.params_mut(), grad)
    }

    pub fn step_params(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.len() != self.m.len() {
            return Err(shape_err("gradient", self.m.len(), grad.len()));
        }
        if params.len() != self.m.len() {
            return Err(shape_err("parameters", self.m.len(), params.len()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
