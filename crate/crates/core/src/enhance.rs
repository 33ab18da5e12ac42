//! Per-modality MLP lifting raw local features into the embedding space.
//!
//! Parameters live in one flat buffer, layer after layer, each layer stored
//! as its `out x in` row-major weight followed by its bias. Hidden layers
//! apply the activation; the last layer is linear.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => libm::tanh(x),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    /// Layer widths, input first: `[in, hidden.., out]`.
    widths: Vec<usize>,
    activation: Activation,
    values: Vec<f64>,
}

/// Same layout as [`MlpParams`]; accumulated over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub values: Vec<f64>,
}

impl MlpGradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGradients { values: vec![0.0; params.len()] }
    }

    pub fn add_assign(&mut self, other: &MlpGradients) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(Error::ShapeMismatch("gradient buffers differ in length"));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum()
    }
}

/// What backward needs from forward: the input to every layer and the
/// pre-activations of the hidden layers.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl MlpParams {
    pub fn zeros(widths: &[usize], activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("MLP needs at least two positive widths".into()));
        }
        Ok(MlpParams { widths: widths.to_vec(), activation, values: vec![0.0; param_count(widths)] })
    }

    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn init(widths: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(widths, activation)?;
        for l in 0..p.num_layers() {
            let bound = 1.0 / libm::sqrt(p.widths[l] as f64);
            let (w, b) = p.layer_mut(l);
            for x in w.iter_mut().chain(b.iter_mut()) {
                *x = rng.uniform(-bound, bound);
            }
        }
        Ok(p)
    }

    /// The default architecture: `in -> hidden -> out`, relu, final layer linear.
    pub fn two_layer(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Result<Self> {
        Self::init(&[input, hidden, output], Activation::Relu, rng)
    }

    /// Single linear layer with identity weight and zero bias.
    pub fn identity(dim: usize) -> Result<Self> {
        let mut p = Self::zeros(&[dim, dim], Activation::Relu)?;
        let (w, _) = p.layer_mut(0);
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        Ok(p)
    }

    /// Rebuilds parameters from a flat buffer in the documented layout.
    pub fn from_values(widths: &[usize], activation: Activation, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(widths, activation)?;
        if values.len() != p.values.len() {
            return Err(Error::DimensionMismatch { expected: p.values.len(), found: values.len() });
        }
        p.values = values;
        Ok(p)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn offset(&self, layer: usize) -> usize {
        param_count(&self.widths[..=layer])
    }

    /// `(weight, bias)` of layer `l`; the weight is `out x in` row-major.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
        let start = self.offset(l);
        let (w, rest) = self.values[start..].split_at(fan_in * fan_out);
        (w, &rest[..fan_out])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
        let start = self.offset(l);
        let (w, rest) = self.values[start..].split_at_mut(fan_in * fan_out);
        (w, &mut rest[..fan_out])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    fn linear(&self, l: usize, x: &Matrix) -> Matrix {
        let (w, b) = self.layer(l);
        let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
        let mut out = Matrix::zeros(x.rows(), fan_out);
        for n in 0..x.rows() {
            let xr = x.row(n);
            let or = out.row_mut(n);
            for (o, (wrow, bias)) in or.iter_mut().zip(w.chunks_exact(fan_in).zip(b)) {
                *o = bias + wrow.iter().zip(xr).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        out
    }

    /// Maps every row of `x` independently.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), found: x.cols() });
        }
        let last = self.num_layers() - 1;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(last);
        let mut h = x.clone();
        for l in 0..self.num_layers() {
            let z = self.linear(l, &h);
            inputs.push(h);
            h = if l < last {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = self.activation.apply(*v));
                pre.push(z);
                a
            } else {
                z
            };
        }
        Ok((h, ForwardCache { inputs, pre }))
    }

    /// Forward without retaining intermediates.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), found: x.cols() });
        }
        let last = self.num_layers() - 1;
        let mut h = x.clone();
        for l in 0..self.num_layers() {
            h = self.linear(l, &h);
            if l < last {
                h.as_mut_slice().iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
        }
        Ok(h)
    }

    /// Reverse pass. Returns parameter gradients and the gradient w.r.t. the
    /// forward input.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<(MlpGradients, Matrix)> {
        let rows = cache.inputs.first().map_or(0, Matrix::rows);
        if cache.inputs.len() != self.num_layers() || upstream.shape() != (rows, self.output_dim()) {
            return Err(Error::ShapeMismatch("upstream gradient does not match forward output"));
        }
        let mut grads = MlpGradients::zeros_like(self);
        let mut g = upstream.clone();
        for l in (0..self.num_layers()).rev() {
            if l < self.num_layers() - 1 {
                // g is w.r.t. this layer's activated output, which is inputs[l + 1]
                let z = &cache.pre[l];
                let y = &cache.inputs[l + 1];
                for ((gi, zi), yi) in g.as_mut_slice().iter_mut().zip(z.as_slice()).zip(y.as_slice()) {
                    *gi *= self.activation.derivative(*zi, *yi);
                }
            }
            let x = &cache.inputs[l];
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let start = self.offset(l);
            {
                let (gw, rest) = grads.values[start..].split_at_mut(fan_in * fan_out);
                let gb = &mut rest[..fan_out];
                for n in 0..x.rows() {
                    let (xr, gr) = (x.row(n), g.row(n));
                    for (o, &go) in gr.iter().enumerate() {
                        gb[o] += go;
                        if go != 0.0 {
                            for (gwi, xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(xr) {
                                *gwi += go * xi;
                            }
                        }
                    }
                }
            }
            let (w, _) = self.layer(l);
            let mut gin = Matrix::zeros(x.rows(), fan_in);
            for n in 0..x.rows() {
                let gr = g.row(n);
                let out = gin.row_mut(n);
                for (o, &go) in gr.iter().enumerate() {
                    if go != 0.0 {
                        for (oi, wi) in out.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                            *oi += go * wi;
                        }
                    }
                }
            }
            g = gin;
        }
        Ok((grads, g))
    }
}

/// Enhances a feature set; the count is preserved and the dimension becomes
/// the MLP's output width.
pub fn mlp_forward(params: &MlpParams, fs: &FeatureSet) -> Result<(FeatureSet, ForwardCache)> {
    let (out, cache) = params.forward(&fs.features)?;
    Ok((FeatureSet { item_id: fs.item_id.clone(), modality: fs.modality, features: out }, cache))
}

pub fn mlp_backward(params: &MlpParams, cache: &ForwardCache, upstream: &Matrix) -> Result<(MlpGradients, Matrix)> {
    params.backward(cache, upstream)
}
