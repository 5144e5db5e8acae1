use std::f64::consts::{E, PI};

use flowsuff_core::data::EmbeddingSet;
use flowsuff_core::flow::{FlowConfig, FlowModel};
use flowsuff_core::numcore::{seeded_rng, Matrix};
use flowsuff_core::training::{split_indices, train_conditional, train_marginal, SplitSpec, Stage, TrainConfig, TrainRecord};

fn flow_config() -> FlowConfig {
    FlowConfig {
        hidden_width: Some(32),
        ..FlowConfig::default()
    }
}

/// Rows of `N(0, Σ)` with `Σ = L Lᵀ`.
fn gaussian(n: usize, chol: &[Vec<f64>], seed: u64) -> Matrix {
    let d = chol.len();
    let mut rng = seeded_rng(seed);
    let mut m = Matrix::zeros(n, d);
    for i in 0..n {
        let z = rng.normal_vec(d);
        for r in 0..d {
            m.set(i, r, (0..=r).map(|c| chol[r][c] * z[c]).sum());
        }
    }
    m
}

fn set(id: &str, data: Matrix) -> EmbeddingSet {
    EmbeddingSet::new(id, "corpus", data)
}

fn marginal(v: &EmbeddingSet, split: &SplitSpec, seed: u64) -> (FlowModel, TrainRecord) {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::desk(Stage::Marginal)
    };
    train_marginal(v, split, &flow_config(), &cfg).unwrap()
}

fn conditional(u: &EmbeddingSet, v: &EmbeddingSet, m: &FlowModel, split: &SplitSpec, seed: u64) -> (FlowModel, TrainRecord) {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::desk(Stage::Conditional)
    };
    train_conditional(u, v, m, split, &cfg).unwrap()
}

fn gaussian_entropy(d: usize, log_det_cov: f64) -> f64 {
    0.5 * (d as f64 * (2.0 * PI * E).ln() + log_det_cov)
}

#[test]
fn isotropic_marginal_reaches_gaussian_entropy() {
    let v = set("v", gaussian(2000, &[vec![1.0, 0.0], vec![0.0, 1.0]], 1));
    let split = split_indices(2000, 0.9, 1).unwrap();
    let (model, record) = marginal(&v, &split, 11);
    let target = gaussian_entropy(2, 0.0);
    assert!((target - 2.8379).abs() < 1e-4);
    assert!((record.final_val_nll - target).abs() < 0.1, "{} vs {target}", record.final_val_nll);

    // Epoch 0 scores the untrained flow: standardization then a standard normal.
    let st = model.standardizer();
    let val = v.select(&split.val);
    let expected: f64 = (0..val.rows())
        .map(|i| {
            let z: Vec<f64> = (0..2).map(|j| (val.get(i, j) - st.mean[j]) / st.std[j]).collect();
            0.5 * z.iter().map(|x| x * x).sum::<f64>() + (2.0 * PI).ln() + st.std.iter().map(|s| s.ln()).sum::<f64>()
        })
        .sum::<f64>()
        / val.rows() as f64;
    assert!((record.initial_val_nll() - expected).abs() < 1e-9);
}

#[test]
fn correlated_marginal_reaches_gaussian_entropy() {
    let rho: f64 = 0.9;
    let chol = vec![vec![1.0, 0.0], vec![rho, (1.0 - rho * rho).sqrt()]];
    let v = set("v", gaussian(2000, &chol, 2));
    let split = split_indices(2000, 0.9, 2).unwrap();
    let (model, record) = marginal(&v, &split, 12);
    let target = gaussian_entropy(2, (1.0 - rho * rho).ln());
    assert!((target - 2.0075).abs() < 1e-4);
    assert!((record.final_val_nll - target).abs() < 0.1, "{} vs {target}", record.final_val_nll);

    // The density integrates to one over [-6, 6]^2.
    let h = 0.1;
    let k = 121;
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            let x = [-6.0 + i as f64 * h, -6.0 + j as f64 * h];
            let w = |t: usize| if t == 0 || t == k - 1 { 0.5 } else { 1.0 };
            total += w(i) * w(j) * model.log_prob(&x, None).unwrap().exp();
        }
    }
    total *= h * h;
    assert!((total - 1.0).abs() < 0.02, "integral {total}");

    // Samples reproduce the data moments.
    let samples = model.sample(5000, None, &mut seeded_rng(3)).unwrap();
    let train = v.select(&split.train);
    let (sm, sv) = samples.column_moments();
    let (dm, dv) = train.column_moments();
    for j in 0..2 {
        let var = dv[j] * dv[j];
        let se_mean = (var / 5000.0 + var / train.rows() as f64).sqrt();
        assert!((sm[j] - dm[j]).abs() < 3.0 * se_mean, "mean {j}: {} vs {}", sm[j], dm[j]);
        let se_var = var * (2.0 / 4999.0 + 2.0 / (train.rows() - 1) as f64).sqrt();
        assert!((sv[j] * sv[j] - var).abs() < 3.0 * se_var, "var {j}: {} vs {var}", sv[j] * sv[j]);
    }
}

#[test]
fn conditional_on_dependent_source_reaches_conditional_entropy() {
    let rho: f64 = 0.9;
    let joint = gaussian(2000, &[vec![1.0, 0.0], vec![rho, (1.0 - rho * rho).sqrt()]], 4);
    let col = |j: usize| Matrix::from_vec(2000, 1, (0..2000).map(|i| joint.get(i, j)).collect());
    let u = set("u", col(0));
    let v = set("v", col(1));
    let split = split_indices(2000, 0.9, 4).unwrap();
    let (m, m_rec) = marginal(&v, &split, 14);
    let (_, c_rec) = conditional(&u, &v, &m, &split, 15);
    assert!((c_rec.initial_val_nll() - m_rec.final_val_nll).abs() < 1e-6);
    let target = gaussian_entropy(1, (1.0 - rho * rho).ln());
    assert!((target - 0.5886).abs() < 1e-4);
    assert!((c_rec.final_val_nll - target).abs() < 0.1, "{} vs {target}", c_rec.final_val_nll);
    assert!(c_rec.final_val_nll <= m_rec.final_val_nll - 0.05);
}

#[test]
fn conditional_on_independent_source_matches_marginal() {
    let v = set("v", gaussian(2000, &[vec![1.0, 0.0], vec![0.5, 0.8]], 5));
    let u = set("u", gaussian(2000, &[vec![1.0, 0.0], vec![0.0, 1.0]], 6));
    let split = split_indices(2000, 0.9, 5).unwrap();
    let (m, m_rec) = marginal(&v, &split, 16);
    let (_, c_rec) = conditional(&u, &v, &m, &split, 17);
    assert!((c_rec.initial_val_nll() - m_rec.final_val_nll).abs() < 1e-6);
    assert!((c_rec.final_val_nll - m_rec.final_val_nll).abs() < 0.1);
}

#[test]
fn training_is_deterministic() {
    let v = set("v", gaussian(400, &[vec![1.0, 0.0], vec![0.3, 1.0]], 7));
    let u = set("u", gaussian(400, &[vec![1.0, 0.0], vec![0.0, 1.0]], 8));
    let split = split_indices(400, 0.9, 7).unwrap();
    let run = || {
        let (m, mut mr) = marginal(&v, &split, 18);
        let (c, mut cr) = conditional(&u, &v, &m, &split, 19);
        mr.wall_time_secs = 0.0;
        cr.wall_time_secs = 0.0;
        (m.to_bytes(), c.to_bytes(), serde_json::to_string(&(mr, cr)).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn mismatched_rows_are_rejected() {
    let v = set("v", gaussian(100, &[vec![1.0]], 9));
    let u = set("u", gaussian(90, &[vec![1.0]], 10));
    let split = split_indices(100, 0.9, 0).unwrap();
    let (m, _) = marginal(&v, &split, 0);
    let cfg = TrainConfig::desk(Stage::Conditional);
    assert!(matches!(
        train_conditional(&u, &v, &m, &split, &cfg),
        Err(flowsuff_core::Error::Alignment(_))
    ));
}
