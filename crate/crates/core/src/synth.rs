//! Uniformity baseline, closed-form Gaussian information, and synthetic data
//! generators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::numcore::{seeded_rng, Matrix, RngStream};

/// Ridge added to covariances that fail a Cholesky factorization.
pub const COVARIANCE_RIDGE: f64 = 1e-8;

/// Log of the mean pairwise Gaussian potential `exp(-t‖x−y‖²)` over distinct
/// pairs of L2-normalized rows. Lower means more uniform on the sphere.
pub fn uniformity_loss(data: &Matrix, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Config(format!("uniformity temperature must be positive, got {t}")));
    }
    let n = data.rows();
    if n < 2 {
        return Err(Error::InsufficientData("uniformity needs at least two rows".into()));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = data.row(i);
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                r.iter().map(|x| x / norm).collect()
            } else {
                r.to_vec()
            }
        })
        .collect();
    // Exponents are in [-4t, 0]; shifting by the largest keeps the sum exact.
    let mut exponents = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            exponents.push(-t * d2);
        }
    }
    let max = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = exponents.iter().map(|e| (e - max).exp()).sum();
    Ok(max + (sum / exponents.len() as f64).ln())
}

/// Ranking score for the uniformity baseline: higher is more uniform.
pub fn uniformity_score(emb: &EmbeddingSet, t: f64) -> Result<f64> {
    Ok(-uniformity_loss(&emb.data, t)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianMi {
    /// Mutual information in nats.
    pub value: f64,
    /// True when a covariance needed the ridge to factorize.
    pub ridged: bool,
}

fn covariance(cols: &[&Matrix]) -> DMatrix<f64> {
    let n = cols[0].rows();
    let d: usize = cols.iter().map(|m| m.cols()).sum();
    let mut data = DMatrix::zeros(n, d);
    let mut offset = 0;
    for m in cols {
        for i in 0..n {
            for (j, &x) in m.row(i).iter().enumerate() {
                data[(i, offset + j)] = x;
            }
        }
        offset += m.cols();
    }
    let mean = data.row_mean();
    for mut row in data.row_iter_mut() {
        row -= &mean;
    }
    data.transpose() * &data / (n.max(2) - 1) as f64
}

/// `log det` via Cholesky, adding [`COVARIANCE_RIDGE`] on failure.
fn log_det(cov: DMatrix<f64>, ridged: &mut bool) -> f64 {
    let chol = match cov.clone().cholesky() {
        Some(c) => c,
        None => {
            *ridged = true;
            let d = cov.nrows();
            match (cov + DMatrix::identity(d, d) * COVARIANCE_RIDGE).cholesky() {
                Some(c) => c,
                None => return f64::NEG_INFINITY,
            }
        }
    };
    2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

/// `½ log(det Σ_U det Σ_V / det Σ_joint)` from sample covariances.
pub fn gaussian_mi_closed_form(u: &Matrix, v: &Matrix) -> Result<GaussianMi> {
    if u.rows() != v.rows() {
        return Err(Error::Alignment(format!("U has {} rows, V has {}", u.rows(), v.rows())));
    }
    if u.rows() < 2 {
        return Err(Error::InsufficientData("covariance needs at least two rows".into()));
    }
    let mut ridged = false;
    let lu = log_det(covariance(&[u]), &mut ridged);
    let lv = log_det(covariance(&[v]), &mut ridged);
    let lj = log_det(covariance(&[u, v]), &mut ridged);
    Ok(GaussianMi {
        value: 0.5 * (lu + lv - lj),
        ridged,
    })
}

/// Mutual information of the pairs produced by [`gen_correlated_gaussians`].
pub fn correlated_gaussian_mi(d_u: usize, d_v: usize, rho: f64) -> f64 {
    -(d_u.min(d_v) as f64 / 2.0) * (1.0 - rho * rho).ln()
}

/// Standard-normal `U` and `V` where coordinate `i < min(d_u, d_v)` of `V`
/// has correlation `rho` with coordinate `i` of `U`; other coordinates are
/// independent. Returns the true mutual information alongside.
pub fn gen_correlated_gaussians(n: usize, d_u: usize, d_v: usize, rho: f64, rng: &mut RngStream) -> Result<(Matrix, Matrix, f64)> {
    if !(rho.abs() < 1.0) {
        return Err(Error::Config(format!("correlation must satisfy |rho| < 1, got {rho}")));
    }
    let mut u = Matrix::zeros(n, d_u);
    let mut v = Matrix::zeros(n, d_v);
    let s = (1.0 - rho * rho).sqrt();
    for i in 0..n {
        for j in 0..d_u {
            u.set(i, j, rng.normal());
        }
        for j in 0..d_v {
            let e = rng.normal();
            let x = if j < d_u { rho * u.get(i, j) + s * e } else { e };
            v.set(i, j, x);
        }
    }
    Ok((u, v, correlated_gaussian_mi(d_u, d_v, rho)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticPoolSpec {
    pub latent_dim: usize,
    pub output_dims: Vec<usize>,
    /// Additive noise standard deviation per model; quality is `-noise`.
    pub noise_levels: Vec<f64>,
    pub n: usize,
    pub seed: u64,
}

impl SyntheticPoolSpec {
    /// Four models of width `d` on a shared latent with noise levels
    /// 0.01, 0.1, 1 and 10.
    pub fn noise_ladder(latent_dim: usize, d: usize, n: usize, seed: u64) -> Self {
        Self {
            latent_dim,
            output_dims: vec![d; 4],
            noise_levels: vec![0.01, 0.1, 1.0, 10.0],
            n,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.n == 0 {
            return Err(Error::Config("latent_dim and n must be positive".into()));
        }
        if self.output_dims.len() != self.noise_levels.len() || self.output_dims.len() < 2 {
            return Err(Error::Config(
                "output_dims and noise_levels must list the same number (≥ 2) of models".into(),
            ));
        }
        if self.output_dims.contains(&0) {
            return Err(Error::Config("output dims must be positive".into()));
        }
        if self.noise_levels.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("noise levels must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn model_id(&self, i: usize) -> String {
        format!("synth-{i}")
    }

    /// Content hash of the generating spec, used as the pool's corpus hash.
    pub fn corpus_hash(&self) -> String {
        let json = serde_json::to_vec(&(self.latent_dim, self.n, self.seed)).expect("spec serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPool {
    pub pool: Vec<EmbeddingSet>,
    /// Ground-truth quality per model (`-noise`).
    pub quality: Vec<f64>,
    /// True when two models share a noise level, so the ground-truth ranking
    /// is not strict.
    pub tied: bool,
}

/// Matrix with orthonormal columns (if `rows ≥ cols`) or rows.
fn random_isometry(rows: usize, cols: usize, rng: &mut RngStream) -> DMatrix<f64> {
    let k = rows.max(cols);
    let g = DMatrix::from_fn(k, k, |_, _| rng.normal());
    let q = g.qr().q();
    q.view((0, 0), (rows, cols)).into_owned()
}

/// Row-aligned pool: model `i` is a random isometric linear map of a shared
/// standard-normal latent plus Gaussian noise of level `noise_levels[i]`.
pub fn gen_synthetic_pool(spec: &SyntheticPoolSpec) -> Result<SyntheticPool> {
    spec.validate()?;
    let root = seeded_rng(spec.seed);
    let mut latent_rng = root.derive("latent");
    let latent = DMatrix::from_fn(spec.n, spec.latent_dim, |_, _| latent_rng.normal());
    let hash = spec.corpus_hash();
    let mut pool = Vec::with_capacity(spec.output_dims.len());
    for (i, (&d, &sigma)) in spec.output_dims.iter().zip(&spec.noise_levels).enumerate() {
        let mut rng = root.derive_index("model", i as u64);
        let w = random_isometry(d, spec.latent_dim, &mut rng);
        let clean = &latent * w.transpose();
        let mut data = Matrix::zeros(spec.n, d);
        for r in 0..spec.n {
            for c in 0..d {
                data.set(r, c, clean[(r, c)] + sigma * rng.normal());
            }
        }
        pool.push(EmbeddingSet::new(spec.model_id(i), hash.clone(), data));
    }
    let mut sorted = spec.noise_levels.clone();
    sorted.sort_by(f64::total_cmp);
    let tied = sorted.windows(2).any(|w| w[0] == w[1]);
    Ok(SyntheticPool {
        pool,
        quality: spec.noise_levels.iter().map(|s| -s).collect(),
        tied,
    })
}

/// Per-coordinate sample correlation between two equally shaped matrices.
pub fn coordinate_correlations(a: &Matrix, b: &Matrix) -> Vec<f64> {
    let n = a.rows() as f64;
    (0..a.cols().min(b.cols()))
        .map(|j| {
            let x = DVector::from_iterator(a.rows(), (0..a.rows()).map(|i| a.get(i, j)));
            let y = DVector::from_iterator(b.rows(), (0..b.rows()).map(|i| b.get(i, j)));
            let mx = x.sum() / n;
            let my = y.sum() / n;
            let xc = x.add_scalar(-mx);
            let yc = y.add_scalar(-my);
            xc.dot(&yc) / (xc.norm() * yc.norm())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniformity_of_two_points() {
        let same = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]);
        assert_eq!(uniformity_loss(&same, 2.0).unwrap(), 0.0);
        let antipodal = Matrix::from_rows(&[vec![0.0, 3.0], vec![0.0, -1.0]]);
        assert!((uniformity_loss(&antipodal, 2.0).unwrap() + 8.0).abs() < 1e-12);
        assert!(uniformity_loss(&Matrix::zeros(1, 2), 2.0).is_err());
        assert!(uniformity_loss(&same, 0.0).is_err());
    }

    #[test]
    fn uniform_sphere_beats_single_cluster() {
        let mut rng = seeded_rng(1);
        let n = 2000;
        let spread = Matrix::from_vec(n, 8, rng.normal_vec(n * 8));
        let mut cluster = Matrix::zeros(n, 8);
        for i in 0..n {
            cluster.set(i, 0, 5.0);
            for j in 0..8 {
                let x = cluster.get(i, j) + 0.3 * rng.normal();
                cluster.set(i, j, x);
            }
        }
        assert!(uniformity_loss(&spread, 2.0).unwrap() < uniformity_loss(&cluster, 2.0).unwrap());
    }

    #[test]
    fn uniformity_is_rotation_invariant() {
        let mut rng = seeded_rng(2);
        let x = Matrix::from_vec(100, 4, rng.normal_vec(400));
        let q = random_isometry(4, 4, &mut rng);
        let qm = Matrix::from_vec(4, 4, q.transpose().as_slice().to_vec());
        let rotated = x.matmul(&qm);
        let a = uniformity_loss(&x, 2.0).unwrap();
        let b = uniformity_loss(&rotated, 2.0).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn mi_oracles() {
        assert_eq!(correlated_gaussian_mi(3, 2, 0.0), 0.0);
        assert!((correlated_gaussian_mi(1, 1, 0.9) - 0.8303).abs() < 1e-4);
        let mut rng = seeded_rng(3);
        let (u, v, _) = gen_correlated_gaussians(20000, 2, 2, 0.0, &mut rng).unwrap();
        assert!(gaussian_mi_closed_form(&u, &v).unwrap().value.abs() < 0.02);
        let (u, v, truth) = gen_correlated_gaussians(20000, 1, 1, 0.8, &mut rng).unwrap();
        let est = gaussian_mi_closed_form(&u, &v).unwrap();
        assert!((est.value - truth).abs() < 0.03, "{} vs {truth}", est.value);
        assert!(!est.ridged);
    }

    #[test]
    fn identical_inputs_are_ridged() {
        let mut rng = seeded_rng(4);
        let u = Matrix::from_vec(500, 2, rng.normal_vec(1000));
        let mi = gaussian_mi_closed_form(&u, &u).unwrap();
        assert!(mi.ridged);
        assert!(mi.value > 5.0);
    }

    #[test]
    fn mi_is_invariant_to_linear_maps() {
        let mut rng = seeded_rng(5);
        let (u, v, _) = gen_correlated_gaussians(5000, 2, 2, 0.6, &mut rng).unwrap();
        let a = Matrix::from_rows(&[vec![2.0, 0.5], vec![-1.0, 3.0]]);
        let b = Matrix::from_rows(&[vec![0.1, 0.0], vec![4.0, 1.0]]);
        let base = gaussian_mi_closed_form(&u, &v).unwrap().value;
        let mapped = gaussian_mi_closed_form(&u.matmul(&a), &v.matmul(&b)).unwrap().value;
        assert!((base - mapped).abs() < 1e-3);
    }

    #[test]
    fn correlated_gaussian_moments() {
        let mut rng = seeded_rng(6);
        let (u, v, _) = gen_correlated_gaussians(20000, 2, 3, 0.7, &mut rng).unwrap();
        for r in coordinate_correlations(&u, &v) {
            assert!((r - 0.7).abs() < 0.02, "{r}");
        }
        let joint = covariance(&[&u, &v]);
        let mut truth = DMatrix::<f64>::identity(5, 5);
        for i in 0..2 {
            truth[(i, 2 + i)] = 0.7;
            truth[(2 + i, i)] = 0.7;
        }
        assert!((joint - truth).amax() < 0.03);
        assert!(gen_correlated_gaussians(3, 1, 1, 1.0, &mut rng).is_err());
    }

    #[test]
    fn synthetic_pool_shape_and_truth() {
        let spec = SyntheticPoolSpec::noise_ladder(2, 3, 50, 7);
        let p = gen_synthetic_pool(&spec).unwrap();
        assert_eq!(p.pool.len(), 4);
        assert!(!p.tied);
        assert_eq!(p.quality, vec![-0.01, -0.1, -1.0, -10.0]);
        assert!(p.pool.iter().all(|e| e.n() == 50 && e.d() == 3 && e.corpus_hash == p.pool[0].corpus_hash));
        assert_eq!(gen_synthetic_pool(&spec).unwrap(), p);
        let flat = SyntheticPoolSpec {
            noise_levels: vec![0.5; 4],
            ..spec
        };
        assert!(gen_synthetic_pool(&flat).unwrap().tied);
    }
}
