//! Fully connected network with exact reverse-mode gradients.
//!
//! Parameters live in one flat vector. Layer `l` stores its weight as an
//! `in x out` row-major block followed by `out` biases, so a batch forward is
//! `Y = X W + b` with `X` holding one sample per row.

use alloc::vec;
use alloc::vec::Vec;

use super::gemm::{gemm, Strides};
use crate::error::{bail, Result};
use crate::math;
use crate::rng::{RngPath, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    /// `x * sigmoid(x)`
    #[default]
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * math::sigmoid(x),
            Activation::Tanh => libm::tanh(x),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = math::sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => {
                let t = libm::tanh(x);
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Values saved by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    rows: usize,
    /// Input to every layer (`layers` entries).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// All-zero parameters. `dims` lists input, hidden, and output widths.
    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            bail!(Config, "mlp needs at least input and output widths, all positive: {dims:?}");
        }
        Ok(Self {
            dims: dims.to_vec(),
            activation,
            params: vec![0.0; param_count(dims)],
        })
    }

    pub fn from_params(dims: &[usize], activation: Activation, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(dims, activation)?;
        if params.len() != m.params.len() {
            bail!(Shape, "mlp {dims:?} needs {} parameters, got {}", m.params.len(), params.len());
        }
        if params.iter().any(|p| !p.is_finite()) {
            bail!(Numerics, "mlp parameters must be finite");
        }
        m.params = params;
        Ok(m)
    }

    /// Uniform fan-in initialization: hidden layers use the He bound
    /// `sqrt(6 / fan_in)`, the output layer `0.1 * sqrt(3 / fan_in)` so an
    /// untrained predictor outputs values near zero. Biases start at zero.
    pub fn init(dims: &[usize], activation: Activation, rng: &RngStream) -> Result<Self> {
        let mut m = Self::zeros(dims, activation)?;
        let layers = m.layers();
        let mut off = 0;
        for l in 0..layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = if l + 1 == layers {
                0.1 * math::sqrt(3.0 / fan_in as f64)
            } else {
                math::sqrt(6.0 / fan_in as f64)
            };
            for i in 0..fan_in * fan_out {
                let u = rng.uniform(RngPath::new(l as u32, 0, 0, i as u32));
                m.params[off + i] = bound * (2.0 * u - 1.0);
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(m)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// `(weights, biases)` of layer `l`.
    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let off: usize = param_count(&self.dims[..=l]);
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        let w = &self.params[off..off + i * o];
        (w, &self.params[off + i * o..off + i * o + o])
    }

    fn run(&self, input: &[f64], rows: usize, mut cache: Option<&mut MlpCache>) -> Result<Vec<f64>> {
        if rows == 0 || input.len() != rows * self.input_dim() {
            bail!(
                Shape,
                "mlp input has {} values, expected {} rows x {}",
                input.len(),
                rows,
                self.input_dim()
            );
        }
        let layers = self.layers();
        let mut h = input.to_vec();
        for l in 0..layers {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let (w, b) = self.layer(l);
            let mut a = Vec::with_capacity(rows * o);
            for _ in 0..rows {
                a.extend_from_slice(b);
            }
            gemm(rows, i, o, &h, Strides::row_major(i), w, Strides::row_major(o), 1.0, &mut a);
            let next = if l + 1 < layers {
                let act: Vec<f64> = a.iter().map(|&x| self.activation.apply(x)).collect();
                if let Some(c) = cache.as_deref_mut() {
                    c.pre.push(a);
                }
                act
            } else {
                a
            };
            let prev = core::mem::replace(&mut h, next);
            if let Some(c) = cache.as_deref_mut() {
                c.inputs.push(prev);
            }
        }
        Ok(h)
    }

    /// Batch forward pass keeping the activations needed by [`Mlp::backward`].
    pub fn forward(&self, input: &[f64], rows: usize) -> Result<(Vec<f64>, MlpCache)> {
        let mut cache = MlpCache {
            rows,
            inputs: Vec::with_capacity(self.layers()),
            pre: Vec::with_capacity(self.layers()),
        };
        let out = self.run(input, rows, Some(&mut cache))?;
        Ok((out, cache))
    }

    /// Batch forward pass without a cache.
    pub fn infer(&self, input: &[f64], rows: usize) -> Result<Vec<f64>> {
        self.run(input, rows, None)
    }

    /// Reverse-mode gradients for output gradient `d_out`.
    ///
    /// Returns `(parameter gradients, input gradients)`; the parameter
    /// gradient vector uses the same layout as [`Mlp::params`].
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let rows = cache.rows;
        let layers = self.layers();
        if cache.inputs.len() != layers
            || cache.pre.len() + 1 != layers
            || cache.inputs.iter().zip(&self.dims).any(|(x, &d)| x.len() != rows * d)
        {
            bail!(Shape, "activation cache does not match this network");
        }
        if d_out.len() != rows * self.output_dim() {
            bail!(Shape, "output gradient has {} values, expected {}", d_out.len(), rows * self.output_dim());
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut d = d_out.to_vec();
        for l in (0..layers).rev() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            if l + 1 < layers {
                for (dv, &a) in d.iter_mut().zip(&cache.pre[l]) {
                    *dv *= self.activation.derivative(a);
                }
            }
            let off = param_count(&self.dims[..=l]);
            let (gw, gb) = grads[off..off + i * o + o].split_at_mut(i * o);
            // dW = X^T d
            gemm(i, rows, o, &cache.inputs[l], Strides::transposed(i), &d, Strides::row_major(o), 0.0, gw);
            for r in 0..rows {
                for (g, v) in gb.iter_mut().zip(&d[r * o..(r + 1) * o]) {
                    *g += v;
                }
            }
            // dX = d W^T
            let (w, _) = self.layer(l);
            let mut dx = vec![0.0; rows * i];
            gemm(rows, o, i, &d, Strides::row_major(o), w, Strides::transposed(o), 0.0, &mut dx);
            d = dx;
        }
        Ok((grads, d))
    }
}

/// Single-sample forward pass.
pub fn mlp_forward(params: &Mlp, input: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
    params.forward(input, 1)
}

pub fn mlp_backward(params: &Mlp, cache: &MlpCache, d_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    params.backward(cache, d_out)
}
