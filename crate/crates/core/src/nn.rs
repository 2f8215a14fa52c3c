//! Multilayer-perceptron classifier over a flat parameter vector.
//!
//! Parameters are stored layer by layer. Each layer contributes its weight
//! matrix in row-major `(n_out, n_in)` order followed by its `n_out` biases.
//! Hidden layers apply the configured activation; the last layer produces
//! logits that go through a row-max-stabilized log-softmax.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Architecture of the classifier: `[input, hidden..., classes]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output sizes, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::InvalidSpec(format!(
                "layer sizes must be positive, got {layer_sizes:?}"
            )));
        }
        if *layer_sizes.last().unwrap() < 2 {
            return Err(Error::InvalidSpec("need at least 2 classes".into()));
        }
        Ok(Self {
            layer_sizes,
            activation,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layer_sizes.windows(2).map(|w| (w[0], w[1]))
    }
}

/// Total number of parameters: `Σ (n_in + 1) · n_out` over consecutive layers.
pub fn param_count(spec: &ModelSpec) -> usize {
    spec.layers().map(|(i, o)| (i + 1) * o).sum()
}

/// Flat vector of model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Self(vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.0.iter().position(|v| !v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// A minibatch view: `inputs` is row-major `B × input_dim`.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: &'a [f64],
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(inputs: &'a [f64], labels: &'a [usize]) -> Self {
        Self { inputs, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Weights ~ N(0, 1/fan_in), biases zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = seed::stream(seed, Purpose::Init, &[]);
    let mut out = Vec::with_capacity(param_count(spec));
    for (n_in, n_out) in spec.layers() {
        let scale = 1.0 / (n_in as f64).sqrt();
        for _ in 0..n_in * n_out {
            let z: f64 = rng.sample(StandardNormal);
            out.push(z * scale);
        }
        out.extend(std::iter::repeat_n(0.0, n_out));
    }
    ParamVector(out)
}

fn check_params(spec: &ModelSpec, params: &[f64]) -> Result<()> {
    let p = param_count(spec);
    if params.len() != p {
        return Err(Error::Shape(format!(
            "expected {p} parameters, got {}",
            params.len()
        )));
    }
    Ok(())
}

fn check_inputs(spec: &ModelSpec, inputs: &[f64]) -> Result<usize> {
    let d = spec.input_dim();
    if inputs.len() % d != 0 {
        return Err(Error::Shape(format!(
            "input buffer of length {} is not a multiple of input dim {d}",
            inputs.len()
        )));
    }
    if let Some(i) = inputs.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput {
            row: i / d,
            col: i % d,
        });
    }
    Ok(inputs.len() / d)
}

/// Per-row scratch holding pre-activations and activations of every layer.
struct Trace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Trace {
    fn new(spec: &ModelSpec) -> Self {
        let sizes = spec.layer_sizes();
        Self {
            pre: sizes[1..].iter().map(|&n| vec![0.0; n]).collect(),
            post: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Runs one row forward. Leaves log-probabilities in `post.last()`.
    fn run(&mut self, spec: &ModelSpec, params: &[f64], x: &[f64]) {
        self.post[0].copy_from_slice(x);
        let n_layers = spec.layer_sizes().len() - 1;
        let mut offset = 0;
        for (l, (n_in, n_out)) in spec.layers().enumerate() {
            let w = &params[offset..offset + n_in * n_out];
            let b = &params[offset + n_in * n_out..offset + (n_in + 1) * n_out];
            offset += (n_in + 1) * n_out;
            let (head, tail) = self.post.split_at_mut(l + 1);
            let input = &head[l];
            let z = &mut self.pre[l];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                z[o] = b[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
            }
            let out = &mut tail[0];
            if l + 1 < n_layers {
                for (a, &zz) in out.iter_mut().zip(z.iter()) {
                    *a = spec.activation.apply(zz);
                }
            } else {
                log_softmax(z, out);
            }
        }
    }
}

fn log_softmax(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    for (o, z) in out.iter_mut().zip(logits) {
        *o = z - lse;
    }
}

/// Class probabilities for every input row, returned row-major `B × C`.
pub fn forward(spec: &ModelSpec, params: &ParamVector, inputs: &[f64]) -> Result<Vec<f64>> {
    check_params(spec, params.as_slice())?;
    let rows = check_inputs(spec, inputs)?;
    let d = spec.input_dim();
    let c = spec.n_classes();
    let mut trace = Trace::new(spec);
    let mut probs = Vec::with_capacity(rows * c);
    for x in inputs.chunks_exact(d) {
        trace.run(spec, params.as_slice(), x);
        probs.extend(trace.post.last().unwrap().iter().map(|lp| lp.exp()));
    }
    Ok(probs)
}

/// Accumulates the gradient of `-log p(label | x)` for one row into `grad`,
/// scaled by `weight`. Returns the row's negative log-likelihood.
fn backprop_row(
    spec: &ModelSpec,
    params: &[f64],
    trace: &mut Trace,
    delta: &mut [Vec<f64>],
    x: &[f64],
    label: usize,
    weight: f64,
    grad: &mut [f64],
) -> f64 {
    trace.run(spec, params, x);
    let logp = trace.post.last().unwrap();
    let nll = -logp[label];

    let n_layers = spec.layer_sizes().len() - 1;
    // dL/dlogits = softmax - onehot
    {
        let last = &mut delta[n_layers - 1];
        for (k, d) in last.iter_mut().enumerate() {
            *d = logp[k].exp() - if k == label { 1.0 } else { 0.0 };
        }
    }

    let sizes = spec.layer_sizes();
    let mut offsets = Vec::with_capacity(n_layers);
    let mut off = 0;
    for (n_in, n_out) in spec.layers() {
        offsets.push(off);
        off += (n_in + 1) * n_out;
    }

    for l in (0..n_layers).rev() {
        let n_in = sizes[l];
        let n_out = sizes[l + 1];
        let off = offsets[l];
        let input = &trace.post[l];
        {
            let d = &delta[l];
            let gw = &mut grad[off..off + n_in * n_out];
            for o in 0..n_out {
                let scaled = weight * d[o];
                if scaled == 0.0 {
                    continue;
                }
                for (g, a) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                    *g += scaled * a;
                }
            }
            let gb = &mut grad[off + n_in * n_out..off + (n_in + 1) * n_out];
            for (g, dd) in gb.iter_mut().zip(d) {
                *g += weight * dd;
            }
        }
        if l > 0 {
            let w = &params[off..off + n_in * n_out];
            let (lower, upper) = delta.split_at_mut(l);
            let d_out = &upper[0];
            let d_in = &mut lower[l - 1];
            for (i, di) in d_in.iter_mut().enumerate() {
                let mut s = 0.0;
                for o in 0..n_out {
                    s += w[o * n_in + i] * d_out[o];
                }
                *di = s * spec.activation.derivative(trace.pre[l - 1][i], trace.post[l][i]);
            }
        }
    }
    nll
}

fn check_batch(spec: &ModelSpec, params: &ParamVector, batch: &Batch<'_>) -> Result<()> {
    check_params(spec, params.as_slice())?;
    let rows = check_inputs(spec, batch.inputs)?;
    if rows != batch.labels.len() {
        return Err(Error::Shape(format!(
            "{rows} input rows but {} labels",
            batch.labels.len()
        )));
    }
    if rows == 0 {
        return Err(Error::EmptyDataset);
    }
    let c = spec.n_classes();
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= c) {
        return Err(Error::Shape(format!("label {bad} out of range for {c} classes")));
    }
    Ok(())
}

/// Mean cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch<'_>,
) -> Result<(f64, ParamVector)> {
    check_batch(spec, params, batch)?;
    let d = spec.input_dim();
    let b = batch.len();
    let weight = 1.0 / b as f64;
    let mut trace = Trace::new(spec);
    let mut delta: Vec<Vec<f64>> = spec.layer_sizes()[1..].iter().map(|&n| vec![0.0; n]).collect();
    let mut grad = vec![0.0; params.len()];
    let mut total = 0.0;
    for (row, (x, &y)) in batch.inputs.chunks_exact(d).zip(batch.labels).enumerate() {
        let nll = backprop_row(
            spec,
            params.as_slice(),
            &mut trace,
            &mut delta,
            x,
            y,
            weight,
            &mut grad,
        );
        if !nll.is_finite() {
            return Err(Error::NonFiniteLoss { row });
        }
        total += nll;
    }
    Ok((total * weight, ParamVector(grad)))
}

/// Gradient of each row's own loss, one vector per row.
pub fn per_example_grads(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch<'_>,
) -> Result<Vec<ParamVector>> {
    check_batch(spec, params, batch)?;
    let d = spec.input_dim();
    let mut trace = Trace::new(spec);
    let mut delta: Vec<Vec<f64>> = spec.layer_sizes()[1..].iter().map(|&n| vec![0.0; n]).collect();
    let mut out = Vec::with_capacity(batch.len());
    for (row, (x, &y)) in batch.inputs.chunks_exact(d).zip(batch.labels).enumerate() {
        let mut grad = vec![0.0; params.len()];
        let nll = backprop_row(
            spec,
            params.as_slice(),
            &mut trace,
            &mut delta,
            x,
            y,
            1.0,
            &mut grad,
        );
        if !nll.is_finite() {
            return Err(Error::NonFiniteLoss { row });
        }
        out.push(ParamVector(grad));
    }
    Ok(out)
}
