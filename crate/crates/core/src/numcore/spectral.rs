//! Power-iteration estimates of operator 2-norms.

use super::{norm2, Matrix, RngStream};
use crate::error::{Error, Result};

/// A linear map together with its adjoint.
pub trait LinearOperator {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_transpose(&self, y: &[f64]) -> Vec<f64>;
}

impl LinearOperator for Matrix {
    fn dim_in(&self) -> usize {
        self.cols()
    }

    fn dim_out(&self) -> usize {
        self.rows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matvec(x)
    }

    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        self.matvec_t(y)
    }
}

/// A square operator given by a closure that is its own adjoint.
pub struct SymmetricFn<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64>> LinearOperator for SymmetricFn<F> {
    fn dim_in(&self) -> usize {
        self.dim
    }

    fn dim_out(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (self.f)(x)
    }

    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        (self.f)(y)
    }
}

/// An operator given by separate forward and adjoint closures.
pub struct FnOperator<F, G> {
    pub dim_in: usize,
    pub dim_out: usize,
    pub forward: F,
    pub adjoint: G,
}

impl<F, G> LinearOperator for FnOperator<F, G>
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn dim_in(&self) -> usize {
        self.dim_in
    }

    fn dim_out(&self) -> usize {
        self.dim_out
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (self.forward)(x)
    }

    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        (self.adjoint)(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralEstimate {
    pub norm: f64,
    /// Unit input direction attaining `norm` (dominant right singular vector).
    pub direction: Vec<f64>,
    /// Set when the operator annihilated the probe; `norm` is then 0 and
    /// `direction` is the zero vector.
    pub zero_map: bool,
    /// Relative change of the estimate over the last iteration was at most
    /// [`CONVERGENCE_TOLERANCE`].
    pub converged: bool,
}

pub const CONVERGENCE_TOLERANCE: f64 = 1e-3;

pub const MIN_POWER_ITERS: usize = 10;

/// Estimates `‖op‖₂` by power iteration on `opᵀop` from a random start.
pub fn spectral_norm_probe<O: LinearOperator + ?Sized>(
    op: &O,
    iters: usize,
    rng: &mut RngStream,
) -> Result<SpectralEstimate> {
    if iters < MIN_POWER_ITERS {
        return Err(Error::Config(format!(
            "spectral probe needs at least {MIN_POWER_ITERS} iterations, got {iters}"
        )));
    }
    let n = op.dim_in();
    let zero = || SpectralEstimate {
        norm: 0.0,
        direction: vec![0.0; n],
        zero_map: true,
        converged: true,
    };
    if n == 0 {
        return Ok(zero());
    }
    let mut v = rng.unit_vector(n);
    let mut prev = f64::NAN;
    let mut converged = false;
    for _ in 0..iters {
        let w = op.apply(&v);
        let u = op.apply_transpose(&w);
        let nu = norm2(&u);
        converged = (nu - prev).abs() <= CONVERGENCE_TOLERANCE * nu;
        prev = nu;
        if nu == 0.0 || !nu.is_finite() {
            // Either A v = 0 (zero map along the probe) or numerical blow-up;
            // the latter is reported by the caller via the norm check below.
            if norm2(&w) == 0.0 {
                return Ok(zero());
            }
            break;
        }
        v = u.into_iter().map(|x| x / nu).collect();
    }
    let norm = norm2(&op.apply(&v));
    if !norm.is_finite() {
        return Err(Error::Probe {
            layer: 0,
            reason: "operator produced non-finite output".into(),
        });
    }
    if norm == 0.0 {
        return Ok(zero());
    }
    Ok(SpectralEstimate {
        norm,
        direction: v,
        zero_map: false,
        converged,
    })
}

/// Orthonormal basis (as `k` vectors) of the dominant `k`-dimensional right
/// singular subspace, by block power iteration on `opᵀop` with Gram–Schmidt.
pub fn top_singular_subspace<O: LinearOperator + ?Sized>(
    op: &O,
    k: usize,
    iters: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vec<f64>>> {
    if iters < MIN_POWER_ITERS {
        return Err(Error::Config(format!(
            "subspace iteration needs at least {MIN_POWER_ITERS} iterations, got {iters}"
        )));
    }
    let n = op.dim_in();
    let k = k.min(n);
    let mut basis: Vec<Vec<f64>> = (0..k).map(|_| rng.unit_vector(n)).collect();
    orthonormalize(&mut basis, rng);
    for _ in 0..iters {
        basis = basis.iter().map(|v| op.apply_transpose(&op.apply(v))).collect();
        if basis.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Probe {
                layer: 0,
                reason: "operator produced non-finite output".into(),
            });
        }
        orthonormalize(&mut basis, rng);
    }
    Ok(basis)
}

/// Modified Gram–Schmidt; vectors that collapse are replaced by fresh random
/// directions so the result is always a full orthonormal set.
fn orthonormalize(basis: &mut [Vec<f64>], rng: &mut RngStream) {
    for i in 0..basis.len() {
        for attempt in 0..3 {
            for j in 0..i {
                let (done, rest) = basis.split_at_mut(i);
                let c: f64 = rest[0].iter().zip(&done[j]).map(|(a, b)| a * b).sum();
                rest[0].iter_mut().zip(&done[j]).for_each(|(a, b)| *a -= c * b);
            }
            let nv = norm2(&basis[i]);
            if nv > 1e-12 {
                basis[i].iter_mut().for_each(|x| *x /= nv);
                break;
            }
            if attempt < 2 {
                basis[i] = rng.unit_vector(basis[i].len());
            }
        }
    }
}
