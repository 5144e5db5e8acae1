//! Jacobian probes of flow layers and the finite-sample generalization bound.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{AtomicKind, FlowModel};
use crate::numcore::{dot, norm2, seeded_rng, spectral_norm_probe, top_singular_subspace, FnOperator, Matrix, RngStream};
use crate::training::TrainRecord;

/// How a layer's Jacobian should be interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    /// Learned nonlinear layer.
    Coupling,
    /// Elementwise affine layer.
    Affine,
    /// Distance-preserving reindexing; its perturbation `J − I` counts as 0.
    Isometry,
}

/// A composition of maps `ℝ^d → ℝ^d` that can be probed layer by layer.
/// `ctx` carries per-point side information (the conditioning code of a
/// conditional flow) and is ignored by unconditional stacks.
pub trait LayerStack {
    fn dim(&self) -> usize;
    fn num_layers(&self) -> usize;
    fn kind(&self, l: usize) -> LayerKind;
    fn apply(&self, l: usize, x: &[f64], ctx: Option<&[f64]>) -> Vec<f64>;
    /// `J_lᵀ g` at `x`.
    fn vjp(&self, l: usize, x: &[f64], g: &[f64], ctx: Option<&[f64]>) -> Vec<f64>;
}

impl LayerStack for FlowModel {
    fn dim(&self) -> usize {
        FlowModel::dim(self)
    }

    fn num_layers(&self) -> usize {
        self.num_atomic()
    }

    fn kind(&self, l: usize) -> LayerKind {
        match self.atomic_kind(l) {
            AtomicKind::Coupling => LayerKind::Coupling,
            AtomicKind::ActNorm => LayerKind::Affine,
            AtomicKind::Permutation => LayerKind::Isometry,
        }
    }

    fn apply(&self, l: usize, x: &[f64], ctx: Option<&[f64]>) -> Vec<f64> {
        self.apply_atomic(l, x, ctx).0
    }

    fn vjp(&self, l: usize, x: &[f64], g: &[f64], ctx: Option<&[f64]>) -> Vec<f64> {
        self.atomic_vjp(l, x, g, ctx)
    }
}

/// Stack of fixed square matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearStack {
    pub layers: Vec<Matrix>,
}

impl LayerStack for LinearStack {
    fn dim(&self) -> usize {
        self.layers.first().map_or(0, |m| m.cols())
    }

    fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn kind(&self, _: usize) -> LayerKind {
        LayerKind::Coupling
    }

    fn apply(&self, l: usize, x: &[f64], _: Option<&[f64]>) -> Vec<f64> {
        self.layers[l].matvec(x)
    }

    fn vjp(&self, l: usize, _: &[f64], g: &[f64], _: Option<&[f64]>) -> Vec<f64> {
        self.layers[l].matvec_t(g)
    }
}

/// Input to the first layer of a stack plus its per-point context.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbePoint {
    pub x: Vec<f64>,
    pub ctx: Option<Vec<f64>>,
}

impl ProbePoint {
    pub fn new(x: Vec<f64>) -> Self {
        Self { x, ctx: None }
    }
}

/// Probe points for a flow: standardized rows of `v` with conditioning codes
/// from the aligned rows of `u`.
pub fn flow_probe_points(model: &FlowModel, v: &Matrix, u: Option<&Matrix>) -> Result<Vec<ProbePoint>> {
    (0..v.rows())
        .map(|i| {
            Ok(ProbePoint {
                x: model.standardize(v.row(i)),
                ctx: model.conditioning_code(u.map(|u| u.row(i)))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    /// Finite-difference step for Jacobian-vector products.
    pub eps: f64,
    pub power_iters: usize,
    /// Dimension of the dominant subspaces compared between layers.
    pub subspace_dim: usize,
    /// Perturbation norm for amplification measurements.
    pub amplification_eps: f64,
    /// Random directions per point for amplification measurements.
    pub directions: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            power_iters: 50,
            subspace_dim: 3,
            amplification_eps: 0.01,
            directions: 3,
        }
    }
}

impl ProbeSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.amplification_eps > 0.0) {
            return Err(Error::Config("probe steps must be positive".into()));
        }
        if self.directions == 0 {
            return Err(Error::Config("at least one probe direction is required".into()));
        }
        Ok(())
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Central-difference `J·u ≈ (f(y+εu) − f(y−εu)) / 2ε`.
pub fn jacobian_jvp(f: impl Fn(&[f64]) -> Vec<f64>, point: &[f64], direction: &[f64], eps: f64, layer: usize) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("probe step must be positive, got {eps}")));
    }
    if point.len() != direction.len() {
        return Err(Error::DimensionMismatch {
            context: "probe direction",
            expected: point.len(),
            actual: direction.len(),
        });
    }
    let plus: Vec<f64> = point.iter().zip(direction).map(|(y, u)| y + eps * u).collect();
    let minus: Vec<f64> = point.iter().zip(direction).map(|(y, u)| y - eps * u).collect();
    let out: Vec<f64> = f(&plus).iter().zip(f(&minus)).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    if !all_finite(&out) {
        return Err(Error::Probe {
            layer,
            reason: "Jacobian-vector product is not finite".into(),
        });
    }
    Ok(out)
}

/// Spectral probe of one layer at one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianProbe {
    pub layer: usize,
    pub kind: LayerKind,
    pub point: Vec<f64>,
    /// Dominant right singular vector of `J` (unit norm).
    pub direction: Vec<f64>,
    pub norm_j: f64,
    /// `‖J − I‖₂` (0 for isometries by convention).
    pub norm_delta: f64,
    /// Orthonormal basis of the dominant subspace of `J`, when requested.
    pub subspace: Vec<Vec<f64>>,
    pub eps: f64,
    pub iters: usize,
    pub converged: bool,
}

fn reseat<T>(layer: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Probe { reason, .. } => Error::Probe { layer, reason },
        other => other,
    })
}

/// Probes layer `l` of `stack` at input `x`.
pub fn probe_layer<S: LayerStack + ?Sized>(
    stack: &S,
    l: usize,
    x: &[f64],
    ctx: Option<&[f64]>,
    settings: &ProbeSettings,
    rng: &mut RngStream,
) -> Result<JacobianProbe> {
    let d = stack.dim();
    let f = |y: &[f64]| stack.apply(l, y, ctx);
    let jvp = |u: &[f64]| jacobian_jvp(f, x, u, settings.eps, l).unwrap_or_else(|_| vec![f64::NAN; d]);
    let vjp = |g: &[f64]| stack.vjp(l, x, g, ctx);
    let j = FnOperator {
        dim_in: d,
        dim_out: d,
        forward: jvp,
        adjoint: vjp,
    };
    let est_j = reseat(l, spectral_norm_probe(&j, settings.power_iters, rng))?;
    let kind = stack.kind(l);
    let (norm_delta, converged_delta) = if kind == LayerKind::Isometry {
        (0.0, true)
    } else {
        let delta = FnOperator {
            dim_in: d,
            dim_out: d,
            forward: |u: &[f64]| jvp(u).iter().zip(u).map(|(a, b)| a - b).collect::<Vec<f64>>(),
            adjoint: |g: &[f64]| vjp(g).iter().zip(g).map(|(a, b)| a - b).collect::<Vec<f64>>(),
        };
        let est = reseat(l, spectral_norm_probe(&delta, settings.power_iters, rng))?;
        (est.norm, est.converged)
    };
    let subspace = if settings.subspace_dim > 0 && kind == LayerKind::Coupling {
        reseat(l, top_singular_subspace(&j, settings.subspace_dim, settings.power_iters, rng))?
    } else {
        Vec::new()
    };
    Ok(JacobianProbe {
        layer: l,
        kind,
        point: x.to_vec(),
        direction: est_j.direction,
        norm_j: est_j.norm,
        norm_delta,
        subspace,
        eps: settings.eps,
        iters: settings.power_iters,
        converged: est_j.converged && converged_delta,
    })
}

/// Inputs to every layer along the trajectory of `x`; the last entry is the
/// stack output.
pub fn trajectory<S: LayerStack + ?Sized>(stack: &S, x: &[f64], ctx: Option<&[f64]>) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(stack.num_layers() + 1);
    let mut cur = x.to_vec();
    for l in 0..stack.num_layers() {
        let next = stack.apply(l, &cur, ctx);
        out.push(std::mem::replace(&mut cur, next));
    }
    out.push(cur);
    out
}

/// Probes every layer at its actual input along the trajectory of each
/// point; result is indexed `[point][layer]`.
pub fn probe_all<S: LayerStack + ?Sized>(stack: &S, points: &[ProbePoint], settings: &ProbeSettings, seed: u64) -> Result<Vec<Vec<JacobianProbe>>> {
    settings.validate()?;
    let root = seeded_rng(seed).derive("probe");
    points
        .iter()
        .enumerate()
        .map(|(p, pt)| {
            let inputs = trajectory(stack, &pt.x, pt.ctx.as_deref());
            (0..stack.num_layers())
                .map(|l| {
                    let mut rng = root.derive_index("point", p as u64).derive_index("layer", l as u64);
                    probe_layer(stack, l, &inputs[l], pt.ctx.as_deref(), settings, &mut rng)
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaBar {
    /// Mean over layers of the per-layer mean `‖J_l − I‖₂`.
    pub value: f64,
    pub per_layer: Vec<f64>,
    /// Layers whose power iteration did not converge at some point.
    pub flagged_layers: Vec<usize>,
}

pub fn sigma_bar_from_probes(probes: &[Vec<JacobianProbe>]) -> Result<SigmaBar> {
    let Some(first) = probes.first() else {
        return Err(Error::InsufficientData("no probe points".into()));
    };
    let layers = first.len();
    if layers == 0 {
        return Err(Error::InsufficientData("stack has no layers".into()));
    }
    let per_layer: Vec<f64> = (0..layers)
        .map(|l| probes.iter().map(|p| p[l].norm_delta).sum::<f64>() / probes.len() as f64)
        .collect();
    let flagged_layers = (0..layers).filter(|&l| probes.iter().any(|p| !p[l].converged)).collect();
    Ok(SigmaBar {
        value: per_layer.iter().sum::<f64>() / layers as f64,
        per_layer,
        flagged_layers,
    })
}

/// Mean spectral norm of the layer perturbations `J_l − I` over the stack.
pub fn estimate_sigma_bar<S: LayerStack + ?Sized>(stack: &S, points: &[ProbePoint], settings: &ProbeSettings, seed: u64) -> Result<SigmaBar> {
    sigma_bar_from_probes(&probe_all(stack, points, settings, seed)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrincipalAngles {
    pub layer_a: usize,
    pub layer_b: usize,
    /// Angles in degrees, ascending, averaged over probe points.
    pub degrees: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionStats {
    pub mean_abs_cos: f64,
    pub max_abs_cos: f64,
    /// Standard error of `mean_abs_cos` over the sampled pairs.
    pub std_err: f64,
    pub pairs: usize,
    /// `1/√d`.
    pub baseline: f64,
    /// `mean_abs_cos / baseline`.
    pub ratio: f64,
    pub adjacent_angles: Vec<PrincipalAngles>,
    pub flagged_layers: Vec<usize>,
}

/// Principal angles (degrees) between the spans of two orthonormal sets.
pub fn principal_angles(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<f64> {
    let m = DMatrix::from_fn(a.len(), b.len(), |i, j| dot(&a[i], &b[j]));
    let mut cosines: Vec<f64> = m.svd(false, false).singular_values.iter().map(|s| s.clamp(0.0, 1.0)).collect();
    cosines.sort_by(|x, y| y.total_cmp(x));
    cosines.iter().map(|c| c.acos().to_degrees()).collect()
}

pub fn direction_stats_from_probes(dim: usize, probes: &[Vec<JacobianProbe>]) -> Result<DirectionStats> {
    let Some(first) = probes.first() else {
        return Err(Error::InsufficientData("no probe points".into()));
    };
    let coupling: Vec<usize> = first.iter().filter(|p| p.kind == LayerKind::Coupling).map(|p| p.layer).collect();
    if coupling.len() < 2 {
        return Err(Error::InsufficientData("direction statistics need at least 2 coupling layers".into()));
    }
    let mut cosines = Vec::new();
    for point in probes {
        for (i, &a) in coupling.iter().enumerate() {
            for &b in &coupling[i + 1..] {
                cosines.push(dot(&point[a].direction, &point[b].direction).abs());
            }
        }
    }
    let n = cosines.len() as f64;
    let mean = cosines.iter().sum::<f64>() / n;
    let var = if cosines.len() > 1 {
        cosines.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let adjacent_angles = coupling
        .windows(2)
        .filter(|w| !first[w[0]].subspace.is_empty())
        .map(|w| {
            let per_point: Vec<Vec<f64>> = probes.iter().map(|p| principal_angles(&p[w[0]].subspace, &p[w[1]].subspace)).collect();
            let k = per_point[0].len();
            PrincipalAngles {
                layer_a: w[0],
                layer_b: w[1],
                degrees: (0..k).map(|i| per_point.iter().map(|a| a[i]).sum::<f64>() / per_point.len() as f64).collect(),
            }
        })
        .collect();
    let baseline = 1.0 / (dim as f64).sqrt();
    Ok(DirectionStats {
        mean_abs_cos: mean,
        max_abs_cos: cosines.iter().cloned().fold(0.0, f64::max),
        std_err: (var / n).sqrt(),
        pairs: cosines.len(),
        baseline,
        ratio: mean / baseline,
        adjacent_angles,
        flagged_layers: coupling.iter().copied().filter(|&l| probes.iter().any(|p| !p[l].converged)).collect(),
    })
}

/// Pairwise `|cos θ|` between dominant singular directions of the coupling
/// layers, with principal angles between adjacent layers' top subspaces.
pub fn layer_direction_stats<S: LayerStack + ?Sized>(stack: &S, points: &[ProbePoint], settings: &ProbeSettings, seed: u64) -> Result<DirectionStats> {
    direction_stats_from_probes(stack.dim(), &probe_all(stack, points, settings, seed)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementStats {
    /// `‖f(y) − y‖ / ‖y‖` over coupling layers and points.
    pub mean_displacement: f64,
    pub median_displacement: f64,
    pub max_displacement: f64,
    /// Geometric mean amplification per layer over points and directions.
    pub per_layer_amplification: Vec<f64>,
    /// Geometric mean over all layers.
    pub geo_mean_amplification: f64,
    pub skipped_points: usize,
}

fn geo_mean(xs: &[f64]) -> f64 {
    (xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp()
}

fn amplification<S: LayerStack + ?Sized>(stack: &S, layers: std::ops::Range<usize>, y: &[f64], u: &[f64], eps: f64, ctx: Option<&[f64]>) -> Result<f64> {
    let run = |x: &[f64]| {
        let mut cur = x.to_vec();
        for l in layers.clone() {
            cur = stack.apply(l, &cur, ctx);
        }
        cur
    };
    let moved: Vec<f64> = y.iter().zip(u).map(|(a, b)| a + eps * b).collect();
    let diff: Vec<f64> = run(&moved).iter().zip(run(y)).map(|(a, b)| a - b).collect();
    let amp = norm2(&diff) / eps;
    if !amp.is_finite() {
        return Err(Error::Probe {
            layer: layers.start,
            reason: "amplification is not finite".into(),
        });
    }
    Ok(amp)
}

/// Relative point displacement of coupling layers and the per-layer
/// amplification `‖f(y+εu) − f(y)‖/ε` in random unit directions.
pub fn layer_displacement_and_amplification<S: LayerStack + ?Sized>(
    stack: &S,
    points: &[ProbePoint],
    settings: &ProbeSettings,
    seed: u64,
) -> Result<DisplacementStats> {
    settings.validate()?;
    let root = seeded_rng(seed).derive("displacement");
    let layers = stack.num_layers();
    let mut displacement = Vec::new();
    let mut amps: Vec<Vec<f64>> = vec![Vec::new(); layers];
    let mut skipped = 0;
    for (p, pt) in points.iter().enumerate() {
        let ctx = pt.ctx.as_deref();
        let inputs = trajectory(stack, &pt.x, ctx);
        for l in 0..layers {
            let y = &inputs[l];
            if stack.kind(l) == LayerKind::Coupling {
                let ny = norm2(y);
                if ny == 0.0 {
                    skipped += 1;
                } else {
                    let d: Vec<f64> = inputs[l + 1].iter().zip(y).map(|(a, b)| a - b).collect();
                    displacement.push(norm2(&d) / ny);
                }
            }
            let mut rng = root.derive_index("point", p as u64).derive_index("layer", l as u64);
            for _ in 0..settings.directions {
                let u = rng.unit_vector(stack.dim());
                amps[l].push(amplification(stack, l..l + 1, y, &u, settings.amplification_eps, ctx)?);
            }
        }
    }
    if displacement.is_empty() {
        return Err(Error::InsufficientData("no usable probe points".into()));
    }
    let mut sorted = displacement.clone();
    sorted.sort_by(f64::total_cmp);
    let per_layer: Vec<f64> = amps.iter().map(|a| geo_mean(a)).collect();
    Ok(DisplacementStats {
        mean_displacement: displacement.iter().sum::<f64>() / displacement.len() as f64,
        median_displacement: crate::sufficiency::Aggregation::Median.apply(&sorted).unwrap_or(0.0),
        max_displacement: *sorted.last().unwrap(),
        geo_mean_amplification: geo_mean(&per_layer),
        per_layer_amplification: per_layer,
        skipped_points: skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplificationStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Every measurement, point-major.
    pub samples: Vec<f64>,
}

/// End-to-end amplification `‖F(y+εu) − F(y)‖/ε` through all layers.
pub fn total_amplification<S: LayerStack + ?Sized>(stack: &S, points: &[ProbePoint], eps: f64, directions: usize, seed: u64) -> Result<AmplificationStats> {
    if !(eps > 0.0) || directions == 0 {
        return Err(Error::Config("amplification needs a positive step and at least one direction".into()));
    }
    let root = seeded_rng(seed).derive("total");
    let mut samples = Vec::with_capacity(points.len() * directions);
    for (p, pt) in points.iter().enumerate() {
        let mut rng = root.derive_index("point", p as u64);
        for _ in 0..directions {
            let u = rng.unit_vector(stack.dim());
            samples.push(amplification(stack, 0..stack.num_layers(), &pt.x, &u, eps, pt.ctx.as_deref())?);
        }
    }
    if samples.is_empty() {
        return Err(Error::InsufficientData("no probe points".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std = if samples.len() > 1 {
        (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(AmplificationStats {
        mean,
        std,
        min: samples.iter().cloned().fold(f64::INFINITY, f64::min),
        max: samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        samples,
    })
}

/// Compounded amplification of `layers` layers each amplifying by `per_layer`.
pub fn compounded_amplification(per_layer: f64, layers: u32) -> f64 {
    per_layer.powi(layers as i32)
}

/// Floor applied to covariance eigenvalues.
pub const EIGENVALUE_FLOOR: f64 = 1e-12;

/// Smallest `k` whose top-`k` principal components explain at least
/// `threshold` of the total variance.
pub fn estimate_d_eff(data: &Matrix, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("variance threshold must lie in (0, 1), got {threshold}")));
    }
    let (n, d) = (data.rows(), data.cols());
    if n < 2 || d == 0 {
        return Err(Error::InsufficientData("effective dimension needs at least 2 rows".into()));
    }
    let (mean, _) = data.column_moments();
    let centered = DMatrix::from_fn(n, d, |i, j| data.get(i, j) - mean[j]);
    // The smaller Gram matrix has the same non-zero spectrum.
    let gram = if n < d {
        &centered * centered.transpose()
    } else {
        centered.transpose() * &centered
    };
    let mut eig: Vec<f64> = SymmetricEigen::new(gram)
        .eigenvalues
        .iter()
        .map(|&e| (e / (n - 1) as f64).max(EIGENVALUE_FLOOR))
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = eig.iter().sum();
    let mut acc = 0.0;
    for (k, e) in eig.iter().enumerate() {
        acc += e;
        if acc >= threshold * total {
            return Ok(k + 1);
        }
    }
    Ok(eig.len())
}

/// Default Rademacher constant `6√π`.
pub fn default_c_rad() -> f64 {
    6.0 * std::f64::consts::PI.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Number of atomic transforms.
    pub depth: usize,
    pub sigma_bar: f64,
    pub d_eff: f64,
    /// Training rows.
    pub m: usize,
    /// Validation rows.
    pub m_val: usize,
    pub m_train_bound: f64,
    pub m_val_bound: f64,
    pub delta: f64,
    pub c_rad: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.sigma_bar, self.d_eff, self.m_train_bound, self.m_val_bound, self.c_rad];
        if nonneg.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config("bound inputs must be finite and non-negative".into()));
        }
        if self.m == 0 || self.m_val == 0 {
            return Err(Error::Config("split sizes must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("confidence delta must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub rademacher: f64,
    pub hoeffding_val: f64,
    pub hoeffding_train: f64,
    pub total: f64,
}

/// Train-validation gap bound:
/// `2·C·L·σ̄·√d_eff/√m + M_val·√(ln(2/δ)/(2m_val)) + 3·M_train·√(ln(2/δ)/(2m))`.
pub fn generalization_bound(b: &BoundInputs) -> Result<BoundTerms> {
    b.validate()?;
    let log_term = (2.0 / b.delta).ln();
    let rademacher = 2.0 * b.c_rad * b.depth as f64 * b.sigma_bar * b.d_eff.sqrt() / (b.m as f64).sqrt();
    let hoeffding_val = b.m_val_bound * (log_term / (2.0 * b.m_val as f64)).sqrt();
    let hoeffding_train = 3.0 * b.m_train_bound * (log_term / (2.0 * b.m as f64)).sqrt();
    Ok(BoundTerms {
        rademacher,
        hoeffding_val,
        hoeffding_train,
        total: rademacher + hoeffding_val + hoeffding_train,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub marginal: BoundTerms,
    pub conditional: BoundTerms,
    pub rademacher: f64,
    pub hoeffding_val: f64,
    pub hoeffding_train: f64,
    /// Bound on the summed gaps of both flows; also bounds the IS error.
    pub delta_theo: f64,
    /// `|train − val|` NLL of the marginal plus that of the conditional.
    pub delta_emp: f64,
    /// `delta_theo / delta_emp`; `None` when the empirical gap is zero.
    pub ratio: Option<f64>,
    /// Rademacher share of `delta_theo`, in percent.
    pub rademacher_share: f64,
    pub is_error_bound: f64,
    pub flags: Vec<String>,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.delta_theo >= self.delta_emp
    }
}

/// Bound inputs for a trained flow, with σ̄ and `d_eff` measured separately.
pub fn bound_inputs_for(model: &FlowModel, record: &TrainRecord, sigma_bar: f64, d_eff: f64) -> BoundInputs {
    BoundInputs {
        depth: model.num_atomic(),
        sigma_bar,
        d_eff,
        m: record.n_train,
        m_val: record.n_val,
        m_train_bound: record.m_train,
        m_val_bound: record.m_val,
        delta: 0.05,
        c_rad: default_c_rad(),
    }
}

pub fn bound_report(
    marginal_record: &TrainRecord,
    conditional_record: &TrainRecord,
    marginal_inputs: &BoundInputs,
    conditional_inputs: &BoundInputs,
) -> Result<BoundReport> {
    let marginal = generalization_bound(marginal_inputs)?;
    let conditional = generalization_bound(conditional_inputs)?;
    let gap = |r: &TrainRecord| (r.final_train_nll - r.final_val_nll).abs();
    let delta_emp = gap(marginal_record) + gap(conditional_record);
    let delta_theo = marginal.total + conditional.total;
    let rademacher = marginal.rademacher + conditional.rademacher;
    let mut flags = Vec::new();
    let ratio = if delta_emp > 0.0 {
        Some(delta_theo / delta_emp)
    } else {
        flags.push("empirical gap is zero; ratio undefined".to_string());
        None
    };
    Ok(BoundReport {
        marginal,
        conditional,
        rademacher,
        hoeffding_val: marginal.hoeffding_val + conditional.hoeffding_val,
        hoeffding_train: marginal.hoeffding_train + conditional.hoeffding_train,
        delta_theo,
        delta_emp,
        ratio,
        rademacher_share: if delta_theo > 0.0 { 100.0 * rademacher / delta_theo } else { 0.0 },
        is_error_bound: delta_theo,
        flags,
    })
}

/// Plain-text table with one row per labelled report and an average row.
pub fn bound_table(rows: &[(String, BoundReport)]) -> String {
    let mut out = format!(
        "{:<24} {:>12} {:>12} {:>14} {:>13}\n",
        "Pair", "Emp. gap", "Bound", "Bound Ratio", "Rademacher %"
    );
    let fmt_ratio = |r: Option<f64>| r.map_or("inf".to_string(), |r| format!("{r:.1}x"));
    for (label, r) in rows {
        out.push_str(&format!(
            "{:<24} {:>12.4} {:>12.4} {:>14} {:>12.1}%\n",
            label,
            r.delta_emp,
            r.delta_theo,
            fmt_ratio(r.ratio),
            r.rademacher_share
        ));
    }
    if !rows.is_empty() {
        let ratios: Vec<f64> = rows.iter().filter_map(|(_, r)| r.ratio).collect();
        let avg_ratio = (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64);
        let avg_share = rows.iter().map(|(_, r)| r.rademacher_share).sum::<f64>() / rows.len() as f64;
        out.push_str(&format!(
            "{:<24} {:>12} {:>12} {:>14} {:>12.1}%\n",
            "Average",
            "",
            "",
            fmt_ratio(avg_ratio),
            avg_share
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{build_flow, FlowConfig};

    fn diag(values: &[f64]) -> Matrix {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    #[test]
    fn jvp_of_identity_and_linear_maps() {
        let u = [0.6, 0.8, 0.0];
        let out = jacobian_jvp(|x| x.to_vec(), &[1.0, -2.0, 3.0], &u, 1e-4, 0).unwrap();
        for (a, b) in out.iter().zip(&u) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = Matrix::from_rows(&[vec![1.0, 2.0, 0.0], vec![0.0, -1.0, 4.0], vec![3.0, 0.5, 1.0]]);
        let out = jacobian_jvp(|x| w.matvec(x), &[0.3, 0.1, -0.7], &u, 1e-4, 0).unwrap();
        for (a, b) in out.iter().zip(w.matvec(&u)) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(jacobian_jvp(|x| x.to_vec(), &[1.0], &[1.0], 0.0, 0).is_err());
        let err = jacobian_jvp(|_| vec![f64::NAN], &[1.0], &[1.0], 1e-4, 7).unwrap_err();
        assert!(matches!(err, Error::Probe { layer: 7, .. }));
    }

    #[test]
    fn sigma_bar_of_known_spectrum() {
        let stack = LinearStack {
            layers: vec![diag(&[1.5, 1.0])],
        };
        let s = estimate_sigma_bar(&stack, &[ProbePoint::new(vec![0.2, 0.3])], &ProbeSettings::default(), 1).unwrap();
        assert!((s.value - 0.5).abs() < 1e-3, "{}", s.value);
        assert!(s.flagged_layers.is_empty());
    }

    #[test]
    fn aligned_layers_have_unit_cosine() {
        let stack = LinearStack {
            layers: vec![diag(&[2.0, 1.0, 1.0, 1.0]); 3],
        };
        let s = layer_direction_stats(&stack, &[ProbePoint::new(vec![0.1; 4])], &ProbeSettings::default(), 2).unwrap();
        assert!((s.mean_abs_cos - 1.0).abs() < 1e-6);
        assert_eq!(s.pairs, 3);
        assert_eq!(s.baseline, 0.5);
        assert_eq!(s.adjacent_angles.len(), 2);
    }

    #[test]
    fn baseline_constant() {
        assert_eq!(1.0 / 4096f64.sqrt(), 0.015625);
    }

    #[test]
    fn random_directions_have_known_mean_abs_cosine() {
        let d = 64;
        let mut rng = seeded_rng(9);
        let cos: Vec<f64> = (0..20000).map(|_| dot(&rng.unit_vector(d), &rng.unit_vector(d)).abs()).collect();
        let mean = cos.iter().sum::<f64>() / cos.len() as f64;
        let expected = (2.0 / (std::f64::consts::PI * d as f64)).sqrt();
        let se = (cos.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (cos.len() - 1) as f64 / cos.len() as f64).sqrt();
        assert!((mean - expected).abs() < 4.0 * se, "{mean} vs {expected}");
        // Below the 1/sqrt(d) baseline by a factor sqrt(2/pi).
        assert!(mean < 1.0 / (d as f64).sqrt());
    }

    #[test]
    fn principal_angles_of_known_subspaces() {
        let e = |i: usize| {
            let mut v = vec![0.0; 4];
            v[i] = 1.0;
            v
        };
        let a = principal_angles(&[e(0), e(1)], &[e(0), e(1)]);
        assert!(a.iter().all(|x| x.abs() < 1e-6));
        let b = principal_angles(&[e(0), e(1)], &[e(2), e(3)]);
        assert!(b.iter().all(|x| (x - 90.0).abs() < 1e-6));
    }

    #[test]
    fn identity_flow_diagnostics() {
        let flow = build_flow(3, &FlowConfig { hidden_width: Some(8), ..FlowConfig::default() }, &seeded_rng(1)).unwrap();
        let mut rng = seeded_rng(2);
        let points: Vec<ProbePoint> = (0..60).map(|_| ProbePoint::new(rng.normal_vec(3))).collect();
        let settings = ProbeSettings::default();
        let s = estimate_sigma_bar(&flow, &points[..5], &settings, 3).unwrap();
        assert!(s.value.abs() < 1e-8, "{}", s.value);
        let disp = layer_displacement_and_amplification(&flow, &points, &settings, 4).unwrap();
        assert!(disp.max_displacement < 1e-12);
        assert!(disp.per_layer_amplification.iter().all(|a| (a - 1.0).abs() < 1e-9));
        let total = total_amplification(&flow, &points, 0.01, 3, 5).unwrap();
        assert!((total.mean - 1.0).abs() < 1e-9 && (total.max - 1.0).abs() < 1e-9);
    }

    #[test]
    fn compounding_arithmetic() {
        let a = compounded_amplification(1.049, 18);
        assert!((2.36..=2.40).contains(&a), "{a}");
        assert!((a - (18.0 * 1.049f64.ln()).exp()).abs() < 1e-12);
        assert!((a - 2.3657).abs() < 1e-4);
        assert!((compounded_amplification(1.5, 18) - 1477.9).abs() < 0.05);
    }

    #[test]
    fn d_eff_of_plane_and_isotropic_data() {
        let mut rng = seeded_rng(3);
        let basis: Vec<Vec<f64>> = (0..2).map(|_| rng.normal_vec(50)).collect();
        let mut plane = Matrix::zeros(300, 50);
        for i in 0..300 {
            let (a, b) = (rng.normal(), rng.normal());
            for j in 0..50 {
                plane.set(i, j, a * basis[0][j] + b * basis[1][j]);
            }
        }
        assert_eq!(estimate_d_eff(&plane, 0.95).unwrap(), 2);
        let iso = Matrix::from_vec(5000, 10, rng.normal_vec(50000));
        let k = estimate_d_eff(&iso, 0.95).unwrap();
        assert!((9..=10).contains(&k), "{k}");
        // Fewer rows than columns uses the Gram matrix.
        assert_eq!(estimate_d_eff(&plane.select_rows(&(0..20).collect::<Vec<_>>()), 0.95).unwrap(), 2);
        assert!(estimate_d_eff(&iso, 1.0).is_err());
    }

    fn inputs() -> BoundInputs {
        BoundInputs {
            depth: 18,
            sigma_bar: 0.049,
            d_eff: 4.0,
            m: 10000,
            m_val: 1000,
            m_train_bound: 5.0,
            m_val_bound: 5.0,
            delta: 0.05,
            c_rad: default_c_rad(),
        }
    }

    #[test]
    fn bound_arithmetic() {
        assert!((default_c_rad() - 10.6347).abs() < 1e-4);
        let t = generalization_bound(&inputs()).unwrap();
        assert!((t.rademacher - 0.3752).abs() < 1e-4, "{}", t.rademacher);
        let log_term = (2.0f64 / 0.05).ln();
        assert!((t.hoeffding_val - 5.0 * (log_term / 2000.0).sqrt()).abs() < 1e-12);
        assert!((t.hoeffding_train - 15.0 * (log_term / 20000.0).sqrt()).abs() < 1e-12);
        assert_eq!(t.total, t.rademacher + t.hoeffding_val + t.hoeffding_train);

        let zero = generalization_bound(&BoundInputs {
            sigma_bar: 0.0,
            m_train_bound: 0.0,
            m_val_bound: 0.0,
            ..inputs()
        })
        .unwrap();
        assert_eq!(zero.total, 0.0);

        let doubled = generalization_bound(&BoundInputs { m: 20000, ..inputs() }).unwrap();
        assert!((t.rademacher / doubled.rademacher - 2f64.sqrt()).abs() < 1e-12);
        let quad = generalization_bound(&BoundInputs { d_eff: 16.0, ..inputs() }).unwrap();
        assert!((quad.rademacher / t.rademacher - 2.0).abs() < 1e-12);
        assert!(generalization_bound(&BoundInputs { delta: 1.0, ..inputs() }).is_err());
    }

    fn record(train: f64, val: f64) -> TrainRecord {
        TrainRecord {
            stage: crate::training::Stage::Marginal,
            epochs: Vec::new(),
            best_epoch: 0,
            final_train_nll: train,
            final_val_nll: val,
            m_train: 5.0,
            m_val: 5.0,
            n_train: 10000,
            n_val: 1000,
            optimizer_steps: 0,
            skipped_steps: 0,
            wall_time_secs: 0.0,
        }
    }

    #[test]
    fn report_sums_both_flows() {
        let r = bound_report(&record(1.0, 1.1), &record(0.5, 0.45), &inputs(), &inputs()).unwrap();
        assert!((r.delta_emp - 0.15).abs() < 1e-12);
        assert!((r.delta_theo - 2.0 * generalization_bound(&inputs()).unwrap().total).abs() < 1e-12);
        assert!((r.ratio.unwrap() - r.delta_theo / 0.15).abs() < 1e-9);
        assert!(r.holds());
        assert!((0.0..=100.0).contains(&r.rademacher_share));
        let flat = bound_report(&record(1.0, 1.0), &record(1.0, 1.0), &inputs(), &inputs()).unwrap();
        assert_eq!(flat.ratio, None);
        assert_eq!(flat.flags.len(), 1);
        let table = bound_table(&[("a->b".into(), r), ("b->a".into(), flat)]);
        assert!(table.contains("Bound Ratio") && table.contains("inf") && table.contains("Average"));
    }

    #[test]
    fn task_average_reproduces_reported_summary() {
        let ratios: [f64; 4] = [11.0, 21.1, 21.2, 18.4];
        let shares: [f64; 4] = [92.4, 94.5, 95.5, 98.5];
        let avg = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        assert_eq!(format!("{:.1}", avg(&ratios)), "17.9");
        assert_eq!(format!("{:.1}", avg(&shares)), "95.2");
    }
}
