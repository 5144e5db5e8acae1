//! Small dense networks with hand-written reverse mode.
//!
//! Weights are row-major `(out_dim, in_dim)`. The backward pass accumulates
//! into each [`ParamTensor::grad`]; callers zero gradients between optimizer
//! steps. An optional additive injection into the first hidden activation is
//! supported so a conditioning branch can be attached without changing the
//! network's parameters.

use serde::{Deserialize, Serialize};

use super::{seeded_rng, ParamTensor, RngStream};
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        let cols = self.weight.cols;
        out.clear();
        out.extend(self.bias.values.iter().enumerate().map(|(o, &b)| {
            let row = &self.weight.values[o * cols..(o + 1) * cols];
            let s: f64 = row.iter().zip(x).map(|(w, xi)| w * xi).sum();
            self.activation.apply(b + s)
        }));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    input_dim: usize,
    output_dim: usize,
}

/// Activations recorded by a forward pass, consumed by the backward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpTrace {
    /// `inputs[i]` is what layer `i` consumed (post-injection for `i == 1`).
    inputs: Vec<Vec<f64>>,
    /// Post-activation output of every layer; the last one is the network output.
    outputs: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().map_or(&[], Vec::as_slice)
    }
}

impl Mlp {
    /// Builds `input_dim → hidden… → output_dim` with `hidden_activation` on
    /// every hidden layer and identity on the last. When `zero_last` is set the
    /// final layer starts at exactly zero.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        hidden_activation: Activation,
        zero_last: bool,
        rng: &mut RngStream,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let last = i == n - 1;
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut weight = ParamTensor::zeros(format!("layer{i}.weight"), fan_out, fan_in);
                let mut bias = ParamTensor::zeros(format!("layer{i}.bias"), fan_out, 1);
                if !(last && zero_last) {
                    for w in &mut weight.values {
                        *w = rng.uniform_range(-bound, bound);
                    }
                    for b in &mut bias.values {
                        *b = rng.uniform_range(-bound, bound);
                    }
                }
                DenseLayer {
                    weight,
                    bias,
                    activation: if last { Activation::Identity } else { hidden_activation },
                }
            })
            .collect();
        Self {
            layers,
            input_dim,
            output_dim,
        }
    }

    /// Convenience constructor with a fixed seed.
    pub fn with_seed(input_dim: usize, hidden: &[usize], output_dim: usize, seed: u64) -> Self {
        Self::new(input_dim, hidden, output_dim, Activation::Tanh, false, &mut seeded_rng(seed))
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Config("an MLP needs at least one layer".into()))?;
        let input_dim = first.in_dim();
        for pair in layers.windows(2) {
            check_dim("mlp layer chain", pair[0].out_dim(), pair[1].in_dim())?;
        }
        let output_dim = layers.last().map_or(0, DenseLayer::out_dim);
        Ok(Self {
            layers,
            input_dim,
            output_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Width of the first hidden activation (the injection point).
    pub fn first_hidden_width(&self) -> usize {
        self.layers[0].out_dim()
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_traced(input, None).outputs.pop().unwrap_or_default()
    }

    /// Forward pass keeping every activation. `injection` is added to the
    /// output of the first layer.
    pub fn forward_traced(&self, input: &[f64], injection: Option<&[f64]>) -> MlpTrace {
        debug_assert_eq!(input.len(), self.input_dim);
        let n = self.layers.len();
        let mut trace = MlpTrace {
            inputs: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
        };
        let mut x = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = Vec::with_capacity(layer.out_dim());
            layer.forward_into(&x, &mut y);
            trace.inputs.push(x);
            x = y.clone();
            if i == 0 {
                if let Some(inj) = injection {
                    for (xi, &v) in x.iter_mut().zip(inj) {
                        *xi += v;
                    }
                }
            }
            trace.outputs.push(y);
        }
        trace
    }

    /// Propagates `upstream` back to the input, returning `∂loss/∂input` and
    /// the pre-activation gradient of every layer.
    fn backprop(
        &self,
        trace: &MlpTrace,
        upstream: &[f64],
        mut injection_grad: Option<&mut [f64]>,
    ) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = self.layers.len();
        let mut pre_grads = vec![Vec::new(); n];
        let mut g = upstream.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i == 0 {
                if let Some(ig) = injection_grad.as_deref_mut() {
                    for (a, &b) in ig.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
            }
            for (gi, &y) in g.iter_mut().zip(&trace.outputs[i]) {
                *gi *= layer.activation.grad_from_output(y);
            }
            let cols = layer.weight.cols;
            let mut g_in = vec![0.0; cols];
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                let wrow = &layer.weight.values[o * cols..(o + 1) * cols];
                for (gk, &w) in g_in.iter_mut().zip(wrow) {
                    *gk += go * w;
                }
            }
            pre_grads[i] = std::mem::replace(&mut g, g_in);
        }
        (g, pre_grads)
    }

    /// Reverse pass for `trace` with `upstream = ∂loss/∂output`. Parameter
    /// gradients are accumulated; returns `∂loss/∂input`. When
    /// `injection_grad` is given it receives `∂loss/∂injection`.
    pub fn backward_traced(
        &mut self,
        trace: &MlpTrace,
        upstream: &[f64],
        injection_grad: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let (g_in, pre_grads) = self.backprop(trace, upstream, injection_grad);
        for ((layer, gpre), inp) in self.layers.iter_mut().zip(&pre_grads).zip(&trace.inputs) {
            let cols = layer.weight.cols;
            for (o, &go) in gpre.iter().enumerate() {
                layer.bias.grad[o] += go;
                if go == 0.0 {
                    continue;
                }
                let grow = &mut layer.weight.grad[o * cols..(o + 1) * cols];
                for (gw, &x) in grow.iter_mut().zip(inp) {
                    *gw += go * x;
                }
            }
        }
        g_in
    }

    /// Vector-Jacobian product with respect to the input only; parameter
    /// gradients are left untouched.
    pub fn input_vjp(&self, trace: &MlpTrace, upstream: &[f64], injection_grad: Option<&mut [f64]>) -> Vec<f64> {
        self.backprop(trace, upstream, injection_grad).0
    }

    /// Checked single-sample forward + backward: returns the output and
    /// `∂(upstream·output)/∂input`, accumulating parameter gradients.
    pub fn forward_backward(&mut self, input: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim("mlp input", self.input_dim, input.len())?;
        check_dim("mlp upstream gradient", self.output_dim, upstream.len())?;
        let trace = self.forward_traced(input, None);
        for (i, out) in trace.outputs.iter().enumerate() {
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!("non-finite activation in mlp layer {i}")));
            }
        }
        let input_grad = self.backward_traced(&trace, upstream, None);
        Ok((trace.output().to_vec(), input_grad))
    }

    pub fn params(&self) -> impl Iterator<Item = &ParamTensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(ParamTensor::zero_grad);
    }
}
