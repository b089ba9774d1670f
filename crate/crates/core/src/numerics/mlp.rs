use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Block, ParamVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Rectifier; the derivative at exactly 0 is taken as 0.
    #[default]
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Fully connected network shape: `widths[0]` inputs, `widths.last()` logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

pub fn weight_name(layer: usize) -> String {
    format!("layer{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("widths", "need at least input and output widths"));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::config("widths", "widths must be positive"));
        }
        Ok(MlpSpec {
            widths,
            activation: Activation::Relu,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Width of the activations feeding the output layer.
    pub fn penultimate_dim(&self) -> usize {
        self.widths[self.widths.len() - 2]
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn zeros(&self) -> ParamVector {
        let mut blocks = Vec::with_capacity(2 * self.num_layers());
        for (l, w) in self.widths.windows(2).enumerate() {
            blocks.push(Block::zeros(weight_name(l), vec![w[1], w[0]]));
            blocks.push(Block::zeros(bias_name(l), vec![w[1]]));
        }
        ParamVector::new(blocks)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(&self, rng: &mut R) -> ParamVector {
        let mut p = self.zeros();
        for (l, w) in self.widths.windows(2).enumerate() {
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            let block = p.block_mut(&weight_name(l)).unwrap();
            for v in block.values.iter_mut() {
                *v = rng.random_range(-limit..limit);
            }
        }
        p
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        let expected = self.zeros();
        params.check_aligned(&expected)
    }
}

/// Activations recorded by [`forward`] for use in [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    widths: Vec<usize>,
    /// Input to each layer; `inputs[0]` is x.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn penultimate(&self) -> &[f64] {
        self.inputs.last().unwrap()
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = x.len();
    let mut out = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = 0.0;
        for i in 0..in_dim {
            acc += row[i] * x[i];
        }
        out.push(acc + b[o]);
    }
    out
}

fn layer_params<'a>(params: &'a ParamVector, l: usize) -> (&'a [f64], &'a [f64]) {
    // Layout is validated by the callers; blocks come in (weight, bias) pairs.
    let blocks = params.blocks();
    (&blocks[2 * l].values, &blocks[2 * l + 1].values)
}

/// Returns `(logits, cache)`; the penultimate activations are `cache.penultimate()`.
pub fn forward(spec: &MlpSpec, params: &ParamVector, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    if x.len() != spec.input_dim() {
        return Err(Error::dim("mlp input", spec.input_dim(), x.len()));
    }
    spec.check_params(params)?;
    let layers = spec.num_layers();
    let mut inputs = Vec::with_capacity(layers);
    let mut pre = Vec::with_capacity(layers - 1);
    let mut a = x.to_vec();
    for l in 0..layers {
        let (w, b) = layer_params(params, l);
        let z = affine(w, b, &a, spec.widths[l + 1]);
        inputs.push(a);
        if l + 1 == layers {
            return Ok((
                z,
                ForwardCache {
                    widths: spec.widths.clone(),
                    inputs,
                    pre,
                },
            ));
        }
        a = z.iter().map(|&v| spec.activation.apply(v)).collect();
        pre.push(z);
    }
    unreachable!()
}

/// Output of the hidden stack up to and including layer `upto` (post-activation).
pub fn hidden_activation(spec: &MlpSpec, params: &ParamVector, x: &[f64], upto: usize) -> Result<Vec<f64>> {
    if upto + 1 >= spec.num_layers() {
        return Err(Error::dim("hidden layer index", spec.num_layers() - 2, upto));
    }
    spec.check_params(params)?;
    let mut a = x.to_vec();
    for l in 0..=upto {
        let (w, b) = layer_params(params, l);
        a = affine(w, b, &a, spec.widths[l + 1])
            .into_iter()
            .map(|v| spec.activation.apply(v))
            .collect();
    }
    Ok(a)
}

/// Runs layers `from..` on an activation vector of width `widths[from]`.
pub fn forward_from(spec: &MlpSpec, params: &ParamVector, from: usize, h: &[f64]) -> Result<Vec<f64>> {
    if h.len() != spec.widths[from] {
        return Err(Error::dim("mlp activation", spec.widths[from], h.len()));
    }
    let layers = spec.num_layers();
    let mut a = h.to_vec();
    for l in from..layers {
        let (w, b) = layer_params(params, l);
        let z = affine(w, b, &a, spec.widths[l + 1]);
        if l + 1 == layers {
            return Ok(z);
        }
        a = z.into_iter().map(|v| spec.activation.apply(v)).collect();
    }
    Ok(a)
}

/// Gradient of `grad_logits · logits` with respect to the parameters.
pub fn backward(
    spec: &MlpSpec,
    params: &ParamVector,
    cache: &ForwardCache,
    grad_logits: &[f64],
) -> Result<ParamVector> {
    let mut grad = spec.zeros();
    accumulate_backward(spec, params, cache, grad_logits, None, &mut grad)?;
    Ok(grad)
}

/// Adds the parameter gradient to `acc`. `grad_penultimate`, when given, is an
/// extra upstream gradient arriving at the penultimate activations.
pub fn accumulate_backward(
    spec: &MlpSpec,
    params: &ParamVector,
    cache: &ForwardCache,
    grad_logits: &[f64],
    grad_penultimate: Option<&[f64]>,
    acc: &mut ParamVector,
) -> Result<()> {
    if cache.widths != spec.widths {
        return Err(Error::Layout("forward cache was produced by another network".into()));
    }
    if grad_logits.len() != spec.output_dim() {
        return Err(Error::dim("grad_logits", spec.output_dim(), grad_logits.len()));
    }
    if let Some(g) = grad_penultimate {
        if g.len() != spec.penultimate_dim() {
            return Err(Error::dim("grad_penultimate", spec.penultimate_dim(), g.len()));
        }
    }
    spec.check_params(params)?;
    spec.check_params(acc)?;

    let layers = spec.num_layers();
    let mut delta = grad_logits.to_vec();
    for l in (0..layers).rev() {
        let input = &cache.inputs[l];
        let in_dim = input.len();
        let out_dim = delta.len();
        {
            let blocks = acc.blocks_mut();
            let gw = &mut blocks[2 * l].values;
            for o in 0..out_dim {
                let d = delta[o];
                let row = &mut gw[o * in_dim..(o + 1) * in_dim];
                for i in 0..in_dim {
                    row[i] += d * input[i];
                }
            }
            let gb = &mut blocks[2 * l + 1].values;
            for o in 0..out_dim {
                gb[o] += delta[o];
            }
        }
        if l == 0 {
            break;
        }
        let (w, _) = layer_params(params, l);
        let mut grad_input = vec![0.0; in_dim];
        for o in 0..out_dim {
            let d = delta[o];
            let row = &w[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                grad_input[i] += row[i] * d;
            }
        }
        if l + 1 == layers {
            if let Some(g) = grad_penultimate {
                for (gi, e) in grad_input.iter_mut().zip(g) {
                    *gi += e;
                }
            }
        }
        let z = &cache.pre[l - 1];
        delta = grad_input
            .iter()
            .zip(z)
            .map(|(g, &zv)| g * spec.activation.derivative(zv))
            .collect();
    }
    Ok(())
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let mut s = 0.0;
    for x in v {
        s += (x - m).exp();
    }
    m + s.ln()
}

/// Computed as `(v - max) - ln(sum(exp(v - max)))`.
pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v {
        s += (x - m).exp();
    }
    let ls = s.ln();
    v.iter().map(|x| (x - m) - ls).collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let mut s = 0.0;
    for x in &e {
        s += x;
    }
    e.into_iter().map(|x| x / s).collect()
}
