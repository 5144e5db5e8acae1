use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::layers::{ActNorm, CouplingLayer, CouplingTrace, LowRankConditioner, Permutation, Standardizer};
use super::spline::SplineConfig;
use crate::error::{check_dim, Error, Result};
use crate::numcore::{Matrix, ParamTensor, RngStream};

/// Maximum `‖T(T⁻¹(z)) − z‖∞` accepted by [`FlowModel::inverse`].
pub const INVERSE_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Number of (coupling, ActNorm, permutation) blocks.
    pub blocks: usize,
    pub bins: usize,
    pub tail_bound: f64,
    pub min_bin_width: f64,
    pub min_bin_height: f64,
    pub min_derivative: f64,
    pub hidden_layers: usize,
    /// Conditioner width; `None` means `max(64, d)`.
    pub hidden_width: Option<usize>,
    /// Bottleneck rank of the low-rank conditioning branch.
    pub rank: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        let s = SplineConfig::default();
        Self {
            blocks: 6,
            bins: s.bins,
            tail_bound: s.tail_bound,
            min_bin_width: s.min_bin_width,
            min_bin_height: s.min_bin_height,
            min_derivative: s.min_derivative,
            hidden_layers: 2,
            hidden_width: None,
            rank: 64,
        }
    }
}

impl FlowConfig {
    pub fn spline(&self) -> SplineConfig {
        SplineConfig {
            bins: self.bins,
            tail_bound: self.tail_bound,
            min_bin_width: self.min_bin_width,
            min_bin_height: self.min_bin_height,
            min_derivative: self.min_derivative,
        }
    }

    pub fn width_for(&self, d: usize) -> usize {
        self.hidden_width.unwrap_or_else(|| d.max(64))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.blocks == 0 {
            return bad("flow needs at least one block");
        }
        if self.bins < 2 {
            return bad("spline needs at least two bins");
        }
        if !(self.tail_bound > 0.0) {
            return bad("tail_bound must be positive");
        }
        let k = self.bins as f64;
        if !(self.min_bin_width > 0.0 && self.min_bin_width * k < 1.0) {
            return bad("min_bin_width must be positive and below 1/bins");
        }
        if !(self.min_bin_height > 0.0 && self.min_bin_height * k < 1.0) {
            return bad("min_bin_height must be positive and below 1/bins");
        }
        if !(self.min_derivative > 0.0 && self.min_derivative < 1.0) {
            return bad("min_derivative must lie in (0, 1)");
        }
        if self.hidden_layers == 0 {
            return bad("conditioner needs at least one hidden layer");
        }
        if self.hidden_width == Some(0) {
            return bad("hidden_width must be positive");
        }
        if self.rank == 0 {
            return bad("rank must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowBlock {
    pub coupling: CouplingLayer,
    pub actnorm: ActNorm,
    pub permutation: Permutation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AtomicKind {
    Coupling,
    ActNorm,
    Permutation,
}

/// Invertible map from data space to a standard-normal base:
/// standardizer, then `L` blocks of coupling → ActNorm → permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub(crate) config: FlowConfig,
    pub(crate) dim: usize,
    pub(crate) seed: u64,
    pub(crate) standardizer: Standardizer,
    pub(crate) blocks: Vec<FlowBlock>,
    pub(crate) conditioner: Option<LowRankConditioner>,
}

fn log_normal(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * (2.0 * PI).ln()
}

fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Builds an unconditional flow on `ℝ^d` whose couplings start as the
/// identity, with ActNorm at scale 1 / shift 0 and an identity standardizer.
pub fn build_flow(d: usize, config: &FlowConfig, rng: &RngStream) -> Result<FlowModel> {
    config.validate()?;
    if d == 0 {
        return Err(Error::Config("flow dimension must be at least 1".into()));
    }
    let width = config.width_for(d);
    let hidden = vec![width; config.hidden_layers];
    let spline = config.spline();
    let blocks = (0..config.blocks)
        .map(|l| {
            let mut net_rng = rng.derive_index("coupling", l as u64);
            let mut perm_rng = rng.derive_index("permutation", l as u64);
            FlowBlock {
                coupling: CouplingLayer::new(d, l, &hidden, spline, &mut net_rng),
                actnorm: ActNorm::new(d, l),
                permutation: Permutation {
                    perm: perm_rng.permutation(d),
                },
            }
        })
        .collect();
    let mut seed_rng = rng.derive("seed");
    Ok(FlowModel {
        config: config.clone(),
        dim: d,
        seed: seed_rng.next_u64(),
        standardizer: Standardizer::identity(d),
        blocks,
        conditioner: None,
    })
}

/// Copies every backbone weight of `marginal` and attaches a low-rank
/// conditioning branch with `B = 0`, so the result initially computes the
/// same density as `marginal` for every source input.
pub fn clone_to_conditional(marginal: &FlowModel, source_dim: usize, rank: usize, rng: &RngStream) -> Result<FlowModel> {
    if marginal.conditioner.is_some() {
        return Err(Error::Config("flow is already conditional".into()));
    }
    if source_dim == 0 || rank == 0 {
        return Err(Error::Config("source dimension and rank must be positive".into()));
    }
    let width = marginal.blocks[0].coupling.net.first_hidden_width();
    let rank = rank.min(source_dim);
    if rank > width {
        return Err(Error::Config(format!(
            "conditioning rank {rank} exceeds conditioner feature width {width}"
        )));
    }
    let widths: Vec<usize> = marginal
        .blocks
        .iter()
        .map(|b| b.coupling.net.first_hidden_width())
        .collect();
    let mut model = marginal.clone();
    model.conditioner = Some(LowRankConditioner::new(
        source_dim,
        rank,
        &widths,
        &mut rng.derive("conditioner"),
    ));
    Ok(model)
}

/// Per-sample conditioning state: standardized source and its low-rank code.
struct Conditioning {
    source: Vec<f64>,
    code: Vec<f64>,
}

impl FlowModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[FlowBlock] {
        &self.blocks
    }

    pub fn is_conditional(&self) -> bool {
        self.conditioner.is_some()
    }

    pub fn conditioner(&self) -> Option<&LowRankConditioner> {
        self.conditioner.as_ref()
    }

    pub fn source_dim(&self) -> Option<usize> {
        self.conditioner.as_ref().map(|c| c.source_dim)
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    /// Drops the conditioning branch, leaving the backbone.
    pub fn backbone(&self) -> FlowModel {
        FlowModel {
            conditioner: None,
            ..self.clone()
        }
    }

    pub fn fit_standardizer(&mut self, data: &Matrix) -> Result<()> {
        check_dim("standardizer fit", self.dim, data.cols())?;
        self.standardizer = Standardizer::fit(data);
        Ok(())
    }

    pub fn fit_source_standardizer(&mut self, source: &Matrix) -> Result<()> {
        let cond = self
            .conditioner
            .as_mut()
            .ok_or_else(|| Error::Config("flow has no conditioning branch".into()))?;
        check_dim("source standardizer fit", cond.source_dim, source.cols())?;
        cond.source_standardizer = Standardizer::fit(source);
        Ok(())
    }

    pub fn standardize(&self, v: &[f64]) -> Vec<f64> {
        self.standardizer.apply(v)
    }

    fn conditioning(&self, u: Option<&[f64]>) -> Result<Option<Conditioning>> {
        match (&self.conditioner, u) {
            (Some(c), Some(u)) => {
                check_dim("source embedding", c.source_dim, u.len())?;
                let (source, code) = c.encode(u);
                Ok(Some(Conditioning { source, code }))
            }
            (None, None) => Ok(None),
            (Some(_), None) => Err(Error::Config("conditional flow needs a source embedding".into())),
            (None, Some(_)) => Err(Error::Config("marginal flow takes no source embedding".into())),
        }
    }

    /// Low-rank code `A ũ` for a source embedding (`None` for marginal flows).
    pub fn conditioning_code(&self, u: Option<&[f64]>) -> Result<Option<Vec<f64>>> {
        Ok(self.conditioning(u)?.map(|c| c.code))
    }

    fn injection(&self, l: usize, code: Option<&[f64]>) -> Option<Vec<f64>> {
        match (&self.conditioner, code) {
            (Some(c), Some(code)) => Some(c.injection(l, code)),
            _ => None,
        }
    }

    pub fn num_atomic(&self) -> usize {
        3 * self.blocks.len()
    }

    pub fn atomic_kind(&self, i: usize) -> AtomicKind {
        match i % 3 {
            0 => AtomicKind::Coupling,
            1 => AtomicKind::ActNorm,
            _ => AtomicKind::Permutation,
        }
    }

    /// Applies atomic transform `i` (in standardized coordinates), returning
    /// its output and log-determinant.
    pub fn apply_atomic(&self, i: usize, x: &[f64], code: Option<&[f64]>) -> (Vec<f64>, f64) {
        let block = &self.blocks[i / 3];
        match self.atomic_kind(i) {
            AtomicKind::Coupling => {
                let inj = self.injection(i / 3, code);
                block.coupling.forward(x, inj.as_deref())
            }
            AtomicKind::ActNorm => block.actnorm.forward(x),
            AtomicKind::Permutation => (block.permutation.forward(x), 0.0),
        }
    }

    /// `J_iᵀ g` for atomic transform `i` at input `x`.
    pub fn atomic_vjp(&self, i: usize, x: &[f64], g: &[f64], code: Option<&[f64]>) -> Vec<f64> {
        let block = &self.blocks[i / 3];
        match self.atomic_kind(i) {
            AtomicKind::Coupling => {
                let inj = self.injection(i / 3, code);
                let (_, _, trace) = block.coupling.forward_traced(x, inj.as_deref());
                block.coupling.vjp(x, &trace, g)
            }
            AtomicKind::ActNorm => block.actnorm.vjp(g),
            AtomicKind::Permutation => block.permutation.vjp(g),
        }
    }

    /// Inputs to every atomic transform for a standardized point; the last
    /// entry is the base-space output.
    pub fn atomic_inputs(&self, x: &[f64], code: Option<&[f64]>) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.num_atomic() + 1);
        let mut cur = x.to_vec();
        for i in 0..self.num_atomic() {
            let (next, _) = self.apply_atomic(i, &cur, code);
            out.push(std::mem::replace(&mut cur, next));
        }
        out.push(cur);
        out
    }

    /// Maps `v` to the base space; returns `(z, log|det J|)` including the
    /// standardizer.
    pub fn forward(&self, v: &[f64], u: Option<&[f64]>) -> Result<(Vec<f64>, f64)> {
        check_dim("flow input", self.dim, v.len())?;
        let cond = self.conditioning(u)?;
        let code = cond.as_ref().map(|c| c.code.as_slice());
        let mut x = self.standardize(v);
        let mut logdet = self.standardizer.log_det();
        for i in 0..self.num_atomic() {
            let (y, ld) = self.apply_atomic(i, &x, code);
            if !all_finite(&y) || !ld.is_finite() {
                return Err(Error::DensityEvaluation {
                    layer: i,
                    context: format!("{:?} produced a non-finite value", self.atomic_kind(i)),
                });
            }
            x = y;
            logdet += ld;
        }
        Ok((x, logdet))
    }

    /// Exact `log p(v)` (or `log p(v | u)`) in nats.
    pub fn log_prob(&self, v: &[f64], u: Option<&[f64]>) -> Result<f64> {
        let (z, logdet) = self.forward(v, u)?;
        Ok(log_normal(&z) + logdet)
    }

    /// Row-wise log-density. `u` must be row-aligned with `v` for conditional
    /// flows.
    pub fn log_prob_rows(&self, v: &Matrix, u: Option<&Matrix>) -> Result<Vec<f64>> {
        check_dim("flow input", self.dim, v.cols())?;
        if let Some(u) = u {
            if u.rows() != v.rows() {
                return Err(Error::Alignment(format!(
                    "source has {} rows, target has {}",
                    u.rows(),
                    v.rows()
                )));
            }
        }
        (0..v.rows())
            .map(|i| self.log_prob(v.row(i), u.map(|u| u.row(i))))
            .collect()
    }

    /// Inverse map without the round-trip check.
    pub fn inverse_unchecked(&self, z: &[f64], u: Option<&[f64]>) -> Result<Vec<f64>> {
        check_dim("base sample", self.dim, z.len())?;
        let cond = self.conditioning(u)?;
        let code = cond.as_ref().map(|c| c.code.as_slice());
        let mut y = z.to_vec();
        for (l, block) in self.blocks.iter().enumerate().rev() {
            y = block.permutation.inverse(&y);
            y = block.actnorm.inverse(&y);
            let inj = self.injection(l, code);
            y = block.coupling.inverse(&y, inj.as_deref()).0;
        }
        Ok(self.standardizer.invert(&y))
    }

    /// `T⁻¹(z)`, verified by pushing the result forward again.
    pub fn inverse(&self, z: &[f64], u: Option<&[f64]>) -> Result<Vec<f64>> {
        let v = self.inverse_unchecked(z, u)?;
        let (back, _) = self.forward(&v, u)?;
        let residual = back
            .iter()
            .zip(z)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if !(residual <= INVERSE_TOLERANCE) {
            return Err(Error::Invertibility {
                residual,
                tolerance: INVERSE_TOLERANCE,
            });
        }
        Ok(v)
    }

    /// Draws `n` samples (conditioned on the rows of `u` when given).
    pub fn sample(&self, n: usize, u: Option<&Matrix>, rng: &mut RngStream) -> Result<Matrix> {
        let mut out = Matrix::zeros(n, self.dim);
        for i in 0..n {
            let z = rng.normal_vec(self.dim);
            let v = self.inverse(&z, u.map(|u| u.row(i % u.rows())))?;
            out.row_mut(i).copy_from_slice(&v);
        }
        Ok(out)
    }

    /// Data-dependent ActNorm initialization from a batch of raw rows,
    /// proceeding block by block so each layer sees its actual input.
    pub fn data_init_actnorm(&mut self, batch: &Matrix, u: Option<&Matrix>) -> Result<()> {
        check_dim("actnorm init batch", self.dim, batch.cols())?;
        let codes: Vec<Option<Vec<f64>>> = (0..batch.rows())
            .map(|i| self.conditioning_code(u.map(|u| u.row(i))))
            .collect::<Result<_>>()?;
        let mut xs: Vec<Vec<f64>> = (0..batch.rows()).map(|i| self.standardize(batch.row(i))).collect();
        for l in 0..self.blocks.len() {
            for (x, code) in xs.iter_mut().zip(&codes) {
                *x = self.apply_atomic(3 * l, x, code.as_deref()).0;
            }
            if !self.blocks[l].actnorm.initialized {
                let m = Matrix::from_rows(&xs);
                self.blocks[l].actnorm.data_init(&m);
            }
            for x in xs.iter_mut() {
                *x = self.blocks[l].actnorm.forward(x).0;
                *x = self.blocks[l].permutation.forward(x);
            }
        }
        Ok(())
    }

    pub fn actnorm_initialized(&self) -> bool {
        self.blocks.iter().all(|b| b.actnorm.initialized)
    }

    /// Negative log-likelihood of one row; adds `weight · ∂NLL/∂θ` to every
    /// parameter gradient.
    pub fn accumulate_nll_grad(&mut self, v: &[f64], u: Option<&[f64]>, weight: f64) -> Result<f64> {
        check_dim("flow input", self.dim, v.len())?;
        let cond = self.conditioning(u)?;
        let code = cond.as_ref().map(|c| c.code.as_slice());
        let n_blocks = self.blocks.len();

        let mut coupling_in = Vec::with_capacity(n_blocks);
        let mut actnorm_in = Vec::with_capacity(n_blocks);
        let mut traces: Vec<CouplingTrace> = Vec::with_capacity(n_blocks);
        let mut x = self.standardize(v);
        let mut logdet = self.standardizer.log_det();
        for l in 0..n_blocks {
            let inj = self.injection(l, code);
            let block = &self.blocks[l];
            let (y, ld, trace) = block.coupling.forward_traced(&x, inj.as_deref());
            if !all_finite(&y) || !ld.is_finite() {
                return Err(Error::DensityEvaluation {
                    layer: 3 * l,
                    context: "coupling produced a non-finite value".into(),
                });
            }
            logdet += ld;
            coupling_in.push(std::mem::replace(&mut x, y));
            traces.push(trace);
            let (y, ld) = block.actnorm.forward(&x);
            logdet += ld;
            actnorm_in.push(std::mem::replace(&mut x, y));
            x = block.permutation.forward(&x);
        }
        let nll = -(log_normal(&x) + logdet);
        if !nll.is_finite() {
            return Err(Error::DensityEvaluation {
                layer: self.num_atomic(),
                context: "non-finite negative log-likelihood".into(),
            });
        }

        let b = -weight;
        let mut g: Vec<f64> = x.iter().map(|z| z * weight).collect();
        let mut g_code = code.map(|c| vec![0.0; c.len()]);
        for l in (0..n_blocks).rev() {
            let block = &mut self.blocks[l];
            g = block.permutation.vjp(&g);
            g = block.actnorm.backward(&actnorm_in[l], &g, b);
            match (&mut self.conditioner, code, g_code.as_mut()) {
                (Some(c), Some(code), Some(g_code)) => {
                    let mut g_inj = vec![0.0; block.coupling.net.first_hidden_width()];
                    g = block.coupling.backward(&coupling_in[l], &traces[l], &g, b, Some(&mut g_inj));
                    c.backward_injection(l, code, &g_inj, g_code);
                }
                _ => {
                    g = block.coupling.backward(&coupling_in[l], &traces[l], &g, b, None);
                }
            }
        }
        if let (Some(c), Some(cond), Some(g_code)) = (&mut self.conditioner, &cond, &g_code) {
            c.backward_code(&cond.source, g_code);
        }
        Ok(nll)
    }

    /// Every trainable tensor, in a fixed order.
    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut out: Vec<&ParamTensor> = Vec::new();
        for b in &self.blocks {
            out.extend(b.coupling.net.params());
            out.push(&b.actnorm.log_scale);
            out.push(&b.actnorm.shift);
        }
        if let Some(c) = &self.conditioner {
            out.push(&c.a);
            out.extend(c.b.iter());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out: Vec<&mut ParamTensor> = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.coupling.net.params_mut());
            out.push(&mut b.actnorm.log_scale);
            out.push(&mut b.actnorm.shift);
        }
        if let Some(c) = &mut self.conditioner {
            out.push(&mut c.a);
            out.extend(c.b.iter_mut());
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn round_to_f32(&mut self) {
        for p in self.params_mut() {
            p.round_to_f32();
        }
    }

    /// Adds `N(0, scale²)` noise to every parameter, including zero-initialized
    /// ones. Used to obtain non-trivial flows without training.
    pub fn randomize(&mut self, scale: f64, rng: &mut RngStream) {
        for p in self.params_mut() {
            for v in &mut p.values {
                *v += scale * rng.normal();
            }
        }
        for b in &mut self.blocks {
            b.actnorm.initialized = true;
        }
    }
}
