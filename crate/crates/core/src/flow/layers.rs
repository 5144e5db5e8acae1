use serde::{Deserialize, Serialize};

use super::spline::{Spline, SplineConfig};
use crate::numcore::{Activation, Matrix, Mlp, MlpTrace, ParamTensor, RngStream};

const STD_FLOOR: f64 = 1e-12;

/// Per-dimension affine map `x ↦ (x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    /// Fits on the rows of `data`. Constant columns get unit scale.
    pub fn fit(data: &Matrix) -> Self {
        let (mean, std) = data.column_moments();
        let std = std.into_iter().map(|s| if s > STD_FLOOR { s } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((z, m), s)| z * s + m)
            .collect()
    }

    /// `log |det|` of [`Standardizer::apply`].
    pub fn log_det(&self) -> f64 {
        -self.std.iter().map(|s| s.ln()).sum::<f64>()
    }
}

/// `y = exp(log_scale) ⊙ x + shift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActNorm {
    pub log_scale: ParamTensor,
    pub shift: ParamTensor,
    pub initialized: bool,
}

impl ActNorm {
    pub fn new(d: usize, block: usize) -> Self {
        Self {
            log_scale: ParamTensor::zeros(format!("block{block}.actnorm.log_scale"), d, 1),
            shift: ParamTensor::zeros(format!("block{block}.actnorm.shift"), d, 1),
            initialized: false,
        }
    }

    /// Sets scale and shift so that `batch` maps to zero mean, unit variance
    /// per dimension.
    pub fn data_init(&mut self, batch: &Matrix) {
        let (mean, std) = batch.column_moments();
        for i in 0..mean.len() {
            let s = std[i].max(1e-6);
            self.log_scale.values[i] = -s.ln();
            self.shift.values[i] = -mean[i] / s;
        }
        self.initialized = true;
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let y = x
            .iter()
            .zip(&self.log_scale.values)
            .zip(&self.shift.values)
            .map(|((x, ls), b)| x * ls.exp() + b)
            .collect();
        (y, self.log_det())
    }

    pub fn inverse(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(&self.log_scale.values)
            .zip(&self.shift.values)
            .map(|((y, ls), b)| (y - b) * (-ls).exp())
            .collect()
    }

    pub fn log_det(&self) -> f64 {
        self.log_scale.values.iter().sum()
    }

    /// Reverse pass for `L = g_y·y + b·logdet`; accumulates parameter grads
    /// and returns `∂L/∂x`.
    pub fn backward(&mut self, x: &[f64], g_y: &[f64], b: f64) -> Vec<f64> {
        let mut g_x = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let s = self.log_scale.values[i].exp();
            self.log_scale.grad[i] += g_y[i] * x[i] * s + b;
            self.shift.grad[i] += g_y[i];
            g_x.push(g_y[i] * s);
        }
        g_x
    }

    pub fn vjp(&self, g_y: &[f64]) -> Vec<f64> {
        g_y.iter()
            .zip(&self.log_scale.values)
            .map(|(g, ls)| g * ls.exp())
            .collect()
    }
}

/// Fixed coordinate reordering `y[i] = x[perm[i]]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    pub perm: Vec<usize>,
}

impl Permutation {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.perm.iter().map(|&p| x[p]).collect()
    }

    pub fn inverse(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; y.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = y[i];
        }
        x
    }

    /// The transpose of a permutation is its inverse.
    pub fn vjp(&self, g_y: &[f64]) -> Vec<f64> {
        self.inverse(g_y)
    }
}

/// Rational-quadratic spline coupling: coordinates in `transformed` are
/// pushed through splines whose parameters come from `net(x[identity])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    pub identity: Vec<usize>,
    pub transformed: Vec<usize>,
    pub net: Mlp,
    pub spline: SplineConfig,
}

/// What a coupling forward pass must keep for its backward pass.
#[derive(Debug, Clone)]
pub struct CouplingTrace {
    mlp: MlpTrace,
    splines: Vec<Spline>,
}

impl CouplingLayer {
    pub fn new(d: usize, block: usize, hidden: &[usize], spline: SplineConfig, rng: &mut RngStream) -> Self {
        let parity = block % 2;
        let (identity, transformed): (Vec<usize>, Vec<usize>) = if d == 1 {
            (Vec::new(), vec![0])
        } else {
            (0..d).partition(|i| i % 2 != parity)
        };
        let mut net = Mlp::new(
            identity.len(),
            hidden,
            transformed.len() * spline.params_per_dim(),
            Activation::Tanh,
            true,
            rng,
        );
        for p in net.params_mut() {
            p.name = format!("block{block}.coupling.{}", p.name);
        }
        Self {
            identity,
            transformed,
            net,
            spline,
        }
    }

    fn conditioner_input(&self, x: &[f64]) -> Vec<f64> {
        self.identity.iter().map(|&i| x[i]).collect()
    }

    fn splines(&self, raw: &[f64]) -> Vec<Spline> {
        raw.chunks(self.spline.params_per_dim())
            .map(|c| Spline::from_raw(c, &self.spline))
            .collect()
    }

    pub fn forward_traced(&self, x: &[f64], injection: Option<&[f64]>) -> (Vec<f64>, f64, CouplingTrace) {
        let mlp = self.net.forward_traced(&self.conditioner_input(x), injection);
        let splines = self.splines(mlp.output());
        let mut y = x.to_vec();
        let mut logdet = 0.0;
        for (&j, s) in self.transformed.iter().zip(&splines) {
            let (v, ld) = s.forward(x[j]);
            y[j] = v;
            logdet += ld;
        }
        (y, logdet, CouplingTrace { mlp, splines })
    }

    pub fn forward(&self, x: &[f64], injection: Option<&[f64]>) -> (Vec<f64>, f64) {
        let (y, ld, _) = self.forward_traced(x, injection);
        (y, ld)
    }

    /// Returns `(x, logdet of the forward map at x)`.
    pub fn inverse(&self, y: &[f64], injection: Option<&[f64]>) -> (Vec<f64>, f64) {
        let mlp = self.net.forward_traced(&self.conditioner_input(y), injection);
        let splines = self.splines(mlp.output());
        let mut x = y.to_vec();
        let mut logdet = 0.0;
        for (&j, s) in self.transformed.iter().zip(&splines) {
            let (v, ld) = s.inverse(y[j]);
            x[j] = v;
            logdet += ld;
        }
        (x, logdet)
    }

    /// Gradient through the splines: returns `(∂L/∂x partial, ∂L/∂raw)` where
    /// the identity-half contribution via the conditioner is not yet added.
    fn spline_backward(&self, x: &[f64], trace: &CouplingTrace, g_y: &[f64], b: f64, want_raw: bool) -> (Vec<f64>, Vec<f64>) {
        let p = self.spline.params_per_dim();
        let mut g_x = g_y.to_vec();
        let mut g_raw = vec![0.0; if want_raw { self.transformed.len() * p } else { 0 }];
        for (t, (&j, s)) in self.transformed.iter().zip(&trace.splines).enumerate() {
            let slot = if want_raw { &mut g_raw[t * p..(t + 1) * p] } else { &mut [][..] };
            g_x[j] = s.backward(x[j], g_y[j], b, slot);
        }
        (g_x, g_raw)
    }

    /// Reverse pass for `L = g_y·y + b·logdet`. Accumulates conditioner
    /// gradients and, if requested, the gradient of the injected features.
    pub fn backward(
        &mut self,
        x: &[f64],
        trace: &CouplingTrace,
        g_y: &[f64],
        b: f64,
        injection_grad: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let (mut g_x, g_raw) = self.spline_backward(x, trace, g_y, b, true);
        let g_id = self.net.backward_traced(&trace.mlp, &g_raw, injection_grad);
        for (&i, g) in self.identity.iter().zip(g_id) {
            g_x[i] += g;
        }
        g_x
    }

    /// `Jᵀ g_y` at `x` without touching parameter gradients.
    pub fn vjp(&self, x: &[f64], trace: &CouplingTrace, g_y: &[f64]) -> Vec<f64> {
        let want_raw = !self.identity.is_empty();
        let (mut g_x, g_raw) = self.spline_backward(x, trace, g_y, 0.0, want_raw);
        if want_raw {
            let g_id = self.net.input_vjp(&trace.mlp, &g_raw, None);
            for (&i, g) in self.identity.iter().zip(g_id) {
                g_x[i] += g;
            }
        }
        g_x
    }
}

/// The zero-initialized low-rank branch `h ← h + B_l (A ũ)` attached to every
/// coupling conditioner, with `ũ` the standardized source embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankConditioner {
    pub source_dim: usize,
    pub rank: usize,
    pub source_standardizer: Standardizer,
    pub a: ParamTensor,
    pub b: Vec<ParamTensor>,
}

impl LowRankConditioner {
    pub fn new(source_dim: usize, rank: usize, widths: &[usize], rng: &mut RngStream) -> Self {
        let scale = 1.0 / (source_dim as f64).sqrt();
        let a = ParamTensor::from_values(
            "conditioner.a",
            rank,
            source_dim,
            (0..rank * source_dim).map(|_| scale * rng.normal()).collect(),
        );
        let b = widths
            .iter()
            .enumerate()
            .map(|(l, &w)| ParamTensor::zeros(format!("block{l}.conditioner.b"), w, rank))
            .collect();
        Self {
            source_dim,
            rank,
            source_standardizer: Standardizer::identity(source_dim),
            a,
            b,
        }
    }

    /// Standardized source and its rank-`r` code `A ũ`.
    pub fn encode(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let us = self.source_standardizer.apply(u);
        let code = (0..self.rank)
            .map(|k| {
                let row = &self.a.values[k * self.source_dim..(k + 1) * self.source_dim];
                row.iter().zip(&us).map(|(a, u)| a * u).sum()
            })
            .collect();
        (us, code)
    }

    /// Injection for block `l`: `B_l · code`.
    pub fn injection(&self, l: usize, code: &[f64]) -> Vec<f64> {
        let b = &self.b[l];
        (0..b.rows)
            .map(|o| {
                let row = &b.values[o * self.rank..(o + 1) * self.rank];
                row.iter().zip(code).map(|(w, c)| w * c).sum()
            })
            .collect()
    }

    /// Accumulates `∂L/∂B_l` and returns `∂L/∂code` contributed by block `l`.
    pub fn backward_injection(&mut self, l: usize, code: &[f64], g_inj: &[f64], g_code: &mut [f64]) {
        let r = self.rank;
        let b = &mut self.b[l];
        for (o, &g) in g_inj.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for k in 0..r {
                b.grad[o * r + k] += g * code[k];
                g_code[k] += g * b.values[o * r + k];
            }
        }
    }

    pub fn backward_code(&mut self, us: &[f64], g_code: &[f64]) {
        let du = self.source_dim;
        for (k, &g) in g_code.iter().enumerate() {
            for (j, &u) in us.iter().enumerate() {
                self.a.grad[k * du + j] += g * u;
            }
        }
    }
}
