//! Dense multilayer perceptrons with a recorded tape for reverse-mode
//! differentiation, plus the Adam optimizer.
//!
//! Inputs are batched as matrices with one sample per row. A forward pass
//! returns the outputs together with a [`Tape`] holding every intermediate
//! value; [`Mlp::backward`] walks the tape in reverse and yields gradients
//! with respect to the weights and the inputs. The input gradient is what
//! the acquisition optimizer and the HMC sampler consume.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementwise nonlinearity applied after every hidden affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Softplus,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(sigmoid(x))` without cancellation.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// One affine layer `y = W x + b` with `W` stored as `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Uniform initialization in `±1/sqrt(fan_in)` for weights and biases.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-bound..bound));
        let bias = Array1::from_shape_fn(outputs, |_| rng.random_range(-bound..bound));
        Self { weight, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        // downstream code slices rows, so keep the result row-major
        if y.is_standard_layout() {
            y
        } else {
            y.as_standard_layout().into_owned()
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Affine { layer: usize, input: Array2<f64> },
    Activation { kind: Activation, input: Array2<f64>, output: Array2<f64> },
}

/// Recorded forward pass. Nodes are stored in execution order, which is
/// also a topological order, so the backward pass is a single reverse sweep.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    batch: usize,
    outputs: usize,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Weight gradients laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        out
    }
}

/// A fully connected network: hidden layers share one activation, the
/// output layer is linear (heads apply their own link functions).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    /// Builds a network with layer widths `sizes = [in, h1, ..., out]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output widths");
        let layers = sizes
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn from_layers(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::dim("layer chaining", pair[0].outputs(), pair[1].inputs()));
            }
        }
        for layer in &layers {
            if layer.bias.len() != layer.outputs() {
                return Err(Error::dim("layer bias", layer.outputs(), layer.bias.len()));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(Dense::outputs));
        sizes
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Weights and biases concatenated layer by layer, weights row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::dim("flat parameter vector", self.num_params(), params.len()));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for w in layer.weight.iter_mut() {
                *w = params[offset];
                offset += 1;
            }
            for b in layer.bias.iter_mut() {
                *b = params[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    /// Evaluates a batch without recording anything.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(input)?;
        let last = self.layers.len() - 1;
        let mut x = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.apply(x.view());
            if i != last {
                x.mapv_inplace(|v| self.activation.apply(v));
            }
        }
        Ok(x)
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_input(input)?;
        let last = self.layers.len() - 1;
        let mut nodes = Vec::with_capacity(2 * self.layers.len());
        let mut x = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.apply(x.view());
            nodes.push(Node::Affine { layer: i, input: x });
            if i != last {
                let post = pre.mapv(|v| self.activation.apply(v));
                x = post.clone();
                nodes.push(Node::Activation {
                    kind: self.activation,
                    input: pre,
                    output: post,
                });
            } else {
                x = pre;
            }
        }
        let tape = Tape {
            nodes,
            batch: input.nrows(),
            outputs: self.output_dim(),
        };
        Ok((x, tape))
    }

    /// Single-sample convenience wrapper around [`Mlp::forward`].
    pub fn forward_one(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|_| Error::dim("network input", self.input_dim(), input.len()))?;
        let (out, tape) = self.forward(view)?;
        Ok((out.into_raw_vec_and_offset().0, tape))
    }

    /// Reverse sweep: returns weight gradients (summed over the batch) and
    /// the per-sample input gradients.
    pub fn backward(&self, tape: &Tape, adjoint: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        let (grads, input) = self.sweep(tape, adjoint, true)?;
        Ok((grads.expect("weight gradients requested"), input))
    }

    /// Like [`Mlp::backward`] but skips the weight gradients.
    pub fn input_gradient(&self, tape: &Tape, adjoint: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.sweep(tape, adjoint, false)?.1)
    }

    fn sweep(
        &self,
        tape: &Tape,
        adjoint: ArrayView2<f64>,
        want_weights: bool,
    ) -> Result<(Option<Gradients>, Array2<f64>)> {
        if adjoint.nrows() != tape.batch {
            return Err(Error::dim("output adjoint rows", tape.batch, adjoint.nrows()));
        }
        if adjoint.ncols() != tape.outputs {
            return Err(Error::dim("output adjoint columns", tape.outputs, adjoint.ncols()));
        }
        let mut grads = want_weights.then(|| Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs(), l.outputs()))
                .collect(),
        });
        let mut adj = adjoint.to_owned();
        for node in tape.nodes.iter().rev() {
            match node {
                Node::Activation { kind, input, output } => {
                    ndarray::Zip::from(&mut adj)
                        .and(input)
                        .and(output)
                        .for_each(|a, &x, &y| *a *= kind.derivative(x, y));
                }
                Node::Affine { layer, input } => {
                    let dense = &self.layers[*layer];
                    if let Some(g) = grads.as_mut() {
                        g.layers[*layer].weight = adj.t().dot(input);
                        g.layers[*layer].bias = adj.sum_axis(Axis(0));
                    }
                    adj = adj.dot(&dense.weight);
                }
            }
        }
        Ok((grads, adj))
    }

    fn check_input(&self, input: ArrayView2<f64>) -> Result<()> {
        if input.ncols() != self.input_dim() {
            return Err(Error::dim("network input", self.input_dim(), input.ncols()));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }
}

/// Adam hyperparameters; defaults are the usual `β1 = 0.9`, `β2 = 0.999`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam descent step. A non-finite gradient leaves both
/// the weights and the moment state untouched.
pub fn adam_step(weights: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if weights.len() != grads.len() {
        return Err(Error::dim("adam gradient", weights.len(), grads.len()));
    }
    if state.m.len() != weights.len() {
        return Err(Error::dim("adam moment state", weights.len(), state.m.len()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("adam gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..weights.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        weights[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}
