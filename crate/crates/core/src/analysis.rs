//! Ranking validation and stress tests: correlations, top-3 overlap,
//! leave-one-out bootstrap, subsample stability, shuffle and conditional-only
//! ablations, weight perturbation, and a pairwise-preference binomial test.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::numcore::{seeded_rng, Matrix, RngStream};
use crate::sufficiency::{aggregate_over, aggregate_scores, Aggregation, IsMatrix, ModelScore, PairwiseRun};
use crate::training::row_nlls;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Sts,
    Retrieval,
    Clustering,
}

/// Externally supplied supervised scores for the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    #[serde(default)]
    pub task: Option<Task>,
}

impl GroundTruth {
    pub fn new(ids: Vec<String>, scores: Vec<f64>) -> Result<Self> {
        let gt = Self { ids, scores, task: None };
        gt.validate()?;
        Ok(gt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.scores.len() {
            return Err(Error::Config(format!(
                "ground truth lists {} ids but {} scores",
                self.ids.len(),
                self.scores.len()
            )));
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("ground-truth scores must be finite".into()));
        }
        Ok(())
    }

    pub fn score_of(&self, id: &str) -> Option<f64> {
        self.ids.iter().position(|i| i == id).map(|k| self.scores[k])
    }

    /// True when every score is equal, so no ranking can be checked.
    pub fn is_degenerate(&self) -> bool {
        self.scores.windows(2).all(|w| w[0] == w[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// `None` when either input has zero variance.
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
    pub n: usize,
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

pub fn rank_correlations(x: &[f64], y: &[f64]) -> Result<CorrelationReport> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "rank correlation inputs",
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::InsufficientData(format!("correlation needs at least 3 values, got {}", x.len())));
    }
    Ok(CorrelationReport {
        spearman: spearman(x, y),
        pearson: pearson(x, y),
        n: x.len(),
    })
}

/// Pairs each scored model with its ground-truth score, in score order.
pub fn paired_with_truth(scores: &[ModelScore], gt: &GroundTruth) -> (Vec<f64>, Vec<f64>) {
    scores
        .iter()
        .filter_map(|s| Some((s.score?, gt.score_of(&s.model_id)?)))
        .unzip()
}

/// Spearman ρ between aggregated scores and ground truth; `None` if undefined.
pub fn spearman_vs_truth(scores: &[ModelScore], gt: &GroundTruth) -> Option<f64> {
    let (x, y) = paired_with_truth(scores, gt);
    if x.len() < 3 {
        return None;
    }
    spearman(&x, &y)
}

/// Ids of the `k` highest scores; ties go to the lexicographically smaller id.
pub fn top_k(scores: &[(String, f64)], k: usize) -> Vec<String> {
    let mut order: Vec<&(String, f64)> = scores.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    order.into_iter().take(k).map(|(id, _)| id.clone()).collect()
}

/// Size of the intersection of two id sets.
pub fn set_overlap<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    a.iter().filter(|x| b.iter().any(|y| y.as_ref() == x.as_ref())).count()
}

/// `|top3(gt) ∩ top3(pred)|`, order-agnostic.
pub fn top3_overlap(gt: &[(String, f64)], predicted: &[(String, f64)]) -> Result<usize> {
    if gt.len() < 3 || predicted.len() < 3 {
        return Err(Error::InsufficientData("top-3 overlap needs at least 3 models".into()));
    }
    Ok(set_overlap(&top_k(gt, 3), &top_k(predicted, 3)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooReplicate {
    pub dropped: String,
    /// `None` for a degenerate replicate.
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooReport {
    pub rho_full: Option<f64>,
    pub rho_min: Option<f64>,
    pub rho_max: Option<f64>,
    pub replicates: Vec<LooReplicate>,
    /// Replicates skipped because ρ was undefined.
    pub flagged: usize,
}

/// Drops each model in turn, re-aggregates the remaining sources over the
/// remaining targets, and recomputes Spearman ρ against ground truth.
pub fn loo_bootstrap(m: &IsMatrix, gt: &GroundTruth, method: Aggregation) -> Result<LooReport> {
    if m.len() < 4 {
        return Err(Error::InsufficientData(format!("leave-one-out needs at least 4 models, got {}", m.len())));
    }
    let rho_full = spearman_vs_truth(&aggregate_scores(m, method), gt);
    let mut replicates = Vec::with_capacity(m.len());
    for drop in 0..m.len() {
        let keep: Vec<usize> = (0..m.len()).filter(|&i| i != drop).collect();
        let scores = aggregate_over(m, &keep, &keep, method);
        replicates.push(LooReplicate {
            dropped: m.ids[drop].clone(),
            rho: spearman_vs_truth(&scores, gt),
        });
    }
    let defined: Vec<f64> = replicates.iter().filter_map(|r| r.rho).collect();
    Ok(LooReport {
        rho_full,
        rho_min: defined.iter().cloned().reduce(f64::min),
        rho_max: defined.iter().cloned().reduce(f64::max),
        flagged: replicates.len() - defined.len(),
        replicates,
    })
}

/// One (control value, repeat) measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSample {
    pub control: f64,
    pub repeat: usize,
    pub seed: u64,
    /// `None` when undefined (e.g. zero-variance scores).
    pub statistic: Option<f64>,
    /// Mean raw IS over all scored pairs for this sample.
    pub mean_is: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub control: f64,
    /// Mean statistic over repeats with a defined value.
    pub statistic: Option<f64>,
    pub mean_is: Option<f64>,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCurve {
    pub name: String,
    /// Name of the control variable (`alpha` or `p`).
    pub control: String,
    /// Name of the statistic (`delta_rho`, `rho`, ...).
    pub statistic: String,
    pub seed: u64,
    pub points: Vec<CurvePoint>,
    pub samples: Vec<CurveSample>,
    pub warnings: Vec<String>,
}

impl AblationCurve {
    /// CSV with columns `control,statistic,repeat,seed,mean_is`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("control,statistic,repeat,seed,mean_is\n");
        let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.control,
                fmt(s.statistic),
                s.repeat,
                s.seed,
                fmt(s.mean_is)
            ));
        }
        out
    }

    pub fn point(&self, control: f64) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.control == control)
    }
}

fn mean_defined(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarize(samples: &[CurveSample], controls: &[f64]) -> Vec<CurvePoint> {
    controls
        .iter()
        .filter_map(|&c| {
            let at: Vec<&CurveSample> = samples.iter().filter(|s| s.control == c).collect();
            (!at.is_empty()).then(|| CurvePoint {
                control: c,
                statistic: mean_defined(at.iter().map(|s| s.statistic)),
                mean_is: mean_defined(at.iter().map(|s| s.mean_is)),
                repeats: at.len(),
            })
        })
        .collect()
}

/// Per-row validation NLLs for every trained flow of a pool, enough to
/// rebuild the score matrix on any subset of validation rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RowNlls {
    pub ids: Vec<String>,
    pub dims: Vec<usize>,
    /// Marginal NLL rows per target.
    pub marginal: Vec<Option<Vec<f64>>>,
    /// Conditional NLL rows per (source, target).
    pub conditional: Vec<Vec<Option<Vec<f64>>>>,
    pub n_val: usize,
}

impl RowNlls {
    pub fn from_run(run: &PairwiseRun) -> Self {
        let ids = run.matrix.ids.clone();
        let marginal = ids.iter().map(|b| run.marginals.get(b).map(|j| j.val_nll.clone())).collect();
        let conditional = ids
            .iter()
            .map(|a| {
                ids.iter()
                    .map(|b| run.conditionals.get(&(a.clone(), b.clone())).map(|j| j.val_nll.clone()))
                    .collect()
            })
            .collect();
        Self {
            dims: run.matrix.dims.clone(),
            n_val: run.split.val.len(),
            ids,
            marginal,
            conditional,
        }
    }

    /// Score matrix using only the given validation rows.
    pub fn matrix_on(&self, rows: &[usize]) -> IsMatrix {
        let mut m = IsMatrix::new(self.ids.clone(), self.dims.clone());
        let mean = |v: &[f64]| rows.iter().map(|&i| v[i]).sum::<f64>() / rows.len() as f64;
        for a in 0..self.ids.len() {
            for b in 0..self.ids.len() {
                if a == b {
                    continue;
                }
                match (&self.marginal[b], &self.conditional[a][b]) {
                    (Some(mv), Some(cv)) => {
                        let is = mean(mv) - mean(cv);
                        if is.is_finite() {
                            m.set(a, b, is);
                        } else {
                            m.flag(a, b, "non-finite score on subsample");
                        }
                    }
                    _ => m.flag(a, b, "missing trained flow"),
                }
            }
        }
        m
    }
}

fn mean_raw(m: &IsMatrix) -> Option<f64> {
    mean_defined(m.raw.iter().flatten().copied())
}

/// Minimum subsample size for a stability measurement.
pub const MIN_SUBSAMPLE_ROWS: usize = 10;

/// What a subsample ranking is correlated with.
#[derive(Debug, Clone, Copy)]
pub enum SubsampleReference<'a> {
    /// The ranking from all validation rows.
    FullRanking,
    GroundTruth(&'a GroundTruth),
}

fn scored(scores: &[ModelScore]) -> Vec<(String, f64)> {
    scores.iter().filter_map(|s| s.score.map(|v| (s.model_id.clone(), v))).collect()
}

/// Spearman ρ between two score lists over the models scored in both.
fn spearman_between(a: &[ModelScore], b: &[ModelScore]) -> Option<f64> {
    let b = scored(b);
    let (x, y): (Vec<f64>, Vec<f64>) = scored(a)
        .into_iter()
        .filter_map(|(id, s)| b.iter().find(|(j, _)| *j == id).map(|(_, t)| (s, *t)))
        .unzip();
    spearman(&x, &y)
}

/// Rescoring on random validation subsets without retraining; reports
/// `Δρ(α) = |ρ(α) − ρ(1.0)|` averaged over repeats.
pub fn subsample_stability(
    rows: &RowNlls,
    alphas: &[f64],
    repeats: usize,
    reference: SubsampleReference<'_>,
    method: Aggregation,
    seed: u64,
) -> Result<AblationCurve> {
    if repeats == 0 {
        return Err(Error::Config("subsample repeats must be at least 1".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
        return Err(Error::Config(format!("subsample fractions must lie in (0, 1], got {a}")));
    }
    let all: Vec<usize> = (0..rows.n_val).collect();
    let full = rows.matrix_on(&all);
    let full_scores = aggregate_scores(&full, method);
    let rho_of = |scores: &[ModelScore]| match reference {
        SubsampleReference::FullRanking => spearman_between(scores, &full_scores),
        SubsampleReference::GroundTruth(gt) => spearman_vs_truth(scores, gt),
    };
    let rho_full = rho_of(&full_scores);
    let root = seeded_rng(seed).derive("subsample");
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for (ai, &alpha) in alphas.iter().enumerate() {
        let k = (alpha * rows.n_val as f64).floor() as usize;
        if k < MIN_SUBSAMPLE_ROWS {
            warnings.push(format!("alpha {alpha} skipped: {k} rows is below {MIN_SUBSAMPLE_ROWS}"));
            continue;
        }
        for r in 0..repeats {
            let sample_seed = root.derive_index("alpha", ai as u64).derive_index("repeat", r as u64).next_u64();
            let m = if k == rows.n_val {
                full.clone()
            } else {
                let subset = seeded_rng(sample_seed).sample_without_replacement(rows.n_val, k);
                rows.matrix_on(&subset)
            };
            let rho = rho_of(&aggregate_scores(&m, method));
            samples.push(CurveSample {
                control: alpha,
                repeat: r,
                seed: sample_seed,
                statistic: rho.zip(rho_full).map(|(a, b)| (a - b).abs()),
                mean_is: mean_raw(&m),
            });
        }
    }
    Ok(AblationCurve {
        name: "subsample".into(),
        control: "alpha".into(),
        statistic: "delta_rho".into(),
        seed,
        points: summarize(&samples, alphas),
        samples,
        warnings,
    })
}

/// Copy of `v` where `⌊p·n⌋` randomly chosen rows are permuted among
/// themselves (fixed points allowed).
pub fn shuffle_rows(v: &Matrix, p: f64, rng: &mut RngStream) -> Matrix {
    let n = v.rows();
    let k = ((p * n as f64).floor() as usize).min(n);
    let mut out = v.clone();
    if k == 0 {
        return out;
    }
    let selected = rng.sample_without_replacement(n, k);
    let perm = rng.permutation(k);
    for (i, &dst) in selected.iter().enumerate() {
        out.row_mut(dst).copy_from_slice(v.row(selected[perm[i]]));
    }
    out
}

/// IS of one pair after shuffling a fraction `p` of the `(u, v)` pairing.
/// `h_v` is the marginal validation entropy, unchanged by the shuffle.
pub fn shuffled_is(h_v: f64, conditional: &FlowModel, u_val: &Matrix, v_val: &Matrix, p: f64, rng: &mut RngStream) -> Result<f64> {
    if u_val.rows() != v_val.rows() {
        return Err(Error::Alignment(format!("U has {} rows, V has {}", u_val.rows(), v_val.rows())));
    }
    let shuffled = shuffle_rows(v_val, p, rng);
    let rows = row_nlls(conditional, &shuffled, Some(u_val));
    let h = rows.iter().sum::<f64>() / rows.len() as f64;
    Ok(h_v - h)
}

fn validate_fractions(ps: &[f64]) -> Result<()> {
    match ps.iter().find(|p| !(**p >= 0.0 && **p <= 1.0)) {
        Some(p) => Err(Error::Config(format!("shuffle fractions must lie in [0, 1], got {p}"))),
        None => Ok(()),
    }
}

/// Re-evaluates every trained conditional flow with a fraction `p` of
/// validation pairs shuffled (the same rows and permutation across the pool
/// for a given `p` and repeat). The statistic is Spearman ρ against ground
/// truth when supplied, otherwise absent; mean raw IS is always reported.
pub fn shuffle_ablation(
    run: &PairwiseRun,
    pool: &[EmbeddingSet],
    ps: &[f64],
    repeats: usize,
    gt: Option<&GroundTruth>,
    method: Aggregation,
    seed: u64,
) -> Result<AblationCurve> {
    validate_fractions(ps)?;
    if repeats == 0 {
        return Err(Error::Config("shuffle repeats must be at least 1".into()));
    }
    let val: Vec<Matrix> = pool.iter().map(|e| e.select(&run.split.val)).collect();
    let index: BTreeMap<&str, usize> = pool.iter().enumerate().map(|(i, e)| (e.model_id.as_str(), i)).collect();
    let n = run.split.val.len();
    let root = seeded_rng(seed).derive("shuffle");
    let mut samples = Vec::new();
    for (pi, &p) in ps.iter().enumerate() {
        for r in 0..repeats {
            let sample_seed = root.derive_index("p", pi as u64).derive_index("repeat", r as u64).next_u64();
            let mut rng = seeded_rng(sample_seed);
            let k = ((p * n as f64).floor() as usize).min(n);
            let selected = rng.sample_without_replacement(n, k);
            let perm = rng.permutation(k);
            let mut m = run.matrix.clone();
            for ((a_id, b_id), job) in &run.conditionals {
                let (a, b) = (index[a_id.as_str()], index[b_id.as_str()]);
                let mut v = val[b].clone();
                for (i, &dst) in selected.iter().enumerate() {
                    v.row_mut(dst).copy_from_slice(val[b].row(selected[perm[i]]));
                }
                let rows = if k == 0 { job.val_nll.clone() } else { row_nlls(&job.model, &v, Some(&val[a])) };
                let marginal = &run.marginals[b_id].val_nll;
                let h_v = marginal.iter().sum::<f64>() / n as f64;
                let h = rows.iter().sum::<f64>() / n as f64;
                if (h_v - h).is_finite() {
                    m.set(a, b, h_v - h);
                } else {
                    m.flag(a, b, "non-finite score after shuffling");
                }
            }
            let statistic = gt.and_then(|gt| spearman_vs_truth(&aggregate_scores(&m, method), gt));
            samples.push(CurveSample {
                control: p,
                repeat: r,
                seed: sample_seed,
                statistic,
                mean_is: mean_raw(&m),
            });
        }
    }
    Ok(AblationCurve {
        name: "shuffle".into(),
        control: "p".into(),
        statistic: "rho".into(),
        seed,
        points: summarize(&samples, ps),
        samples,
        warnings: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CondOnlyScore {
    /// Mean validation `log p(v | u)` in nats.
    pub mean_log_prob: f64,
    /// `mean_log_prob / dim(v)`.
    pub per_dim: f64,
}

/// Conditional-only variant: mean validation log-density of the conditional
/// flow, without subtracting the marginal entropy.
pub fn cond_only_score(conditional: &FlowModel, u_val: &Matrix, v_val: &Matrix) -> Result<CondOnlyScore> {
    if u_val.rows() != v_val.rows() {
        return Err(Error::Alignment(format!("U has {} rows, V has {}", u_val.rows(), v_val.rows())));
    }
    let lp = conditional.log_prob_rows(v_val, Some(u_val))?;
    let mean = lp.iter().sum::<f64>() / lp.len().max(1) as f64;
    Ok(CondOnlyScore {
        mean_log_prob: mean,
        per_dim: mean / v_val.cols() as f64,
    })
}

/// Pool-wide conditional-only matrix: raw entries are mean conditional
/// log-densities, normalized by target dimension like the IS matrix.
pub fn cond_only_matrix(run: &PairwiseRun) -> IsMatrix {
    let mut m = IsMatrix::new(run.matrix.ids.clone(), run.matrix.dims.clone());
    for (a, a_id) in run.matrix.ids.iter().enumerate() {
        for (b, b_id) in run.matrix.ids.iter().enumerate() {
            if a == b {
                continue;
            }
            match run.conditionals.get(&(a_id.clone(), b_id.clone())) {
                Some(job) => {
                    let mean = -job.val_nll.iter().sum::<f64>() / job.val_nll.len() as f64;
                    m.set(a, b, mean);
                }
                None => m.flag(a, b, "missing conditional flow"),
            }
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationStats {
    pub sigma: f64,
    pub draws: usize,
    /// Relative NLL change `|NLL_pert − NLL_clean| / |NLL_clean|` statistics
    /// over finite draws.
    pub median: Option<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub max: Option<f64>,
    /// Draws whose perturbed NLL was not finite.
    pub divergent: usize,
}

/// Adds `N(0, (σ·mean|W|)²)` noise to every parameter tensor `W` and measures
/// the relative change of mean validation NLL.
pub fn weight_perturbation_sweep(
    model: &FlowModel,
    sigmas: &[f64],
    draws: usize,
    v_val: &Matrix,
    u_val: Option<&Matrix>,
    seed: u64,
) -> Result<Vec<PerturbationStats>> {
    if draws == 0 {
        return Err(Error::Config("perturbation draws must be at least 1".into()));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(Error::Config(format!("perturbation scale must be non-negative, got {s}")));
    }
    let nll = |m: &FlowModel| {
        let rows = row_nlls(m, v_val, u_val);
        rows.iter().sum::<f64>() / rows.len() as f64
    };
    let clean = nll(model);
    if !clean.is_finite() {
        return Err(Error::DensityEvaluation {
            layer: 0,
            context: "clean model has non-finite validation NLL".into(),
        });
    }
    let root = seeded_rng(seed).derive("perturb");
    let mut out = Vec::with_capacity(sigmas.len());
    for (si, &sigma) in sigmas.iter().enumerate() {
        let mut changes = Vec::with_capacity(draws);
        let mut divergent = 0;
        for d in 0..draws {
            let mut rng = root.derive_index("sigma", si as u64).derive_index("draw", d as u64);
            let mut noisy = model.clone();
            for p in noisy.params_mut() {
                let scale = sigma * p.mean_abs();
                for w in p.values.iter_mut() {
                    *w += scale * rng.normal();
                }
            }
            let value = nll(&noisy);
            if value.is_finite() {
                changes.push((value - clean).abs() / clean.abs().max(f64::MIN_POSITIVE));
            } else {
                divergent += 1;
            }
        }
        let stats = describe(&changes);
        out.push(PerturbationStats {
            sigma,
            draws,
            median: stats.map(|s| s.0),
            mean: stats.map(|s| s.1),
            std: stats.map(|s| s.2),
            max: stats.map(|s| s.3),
            divergent,
        });
    }
    Ok(out)
}

/// (median, mean, sample std, max).
fn describe(xs: &[f64]) -> Option<(f64, f64, f64, f64)> {
    let median = Aggregation::Median.apply(xs)?;
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((median, mean, std, xs.iter().cloned().fold(f64::MIN, f64::max)))
}

fn ln_choose(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// `P(X ≥ successes)` for `X ~ Binomial(trials, p)`.
pub fn binomial_upper_tail(successes: u64, trials: u64, p: f64) -> f64 {
    if successes == 0 {
        return 1.0;
    }
    if successes > trials || p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let logs: Vec<f64> = (successes..=trials)
        .map(|k| ln_choose(trials, k) + k as f64 * p.ln() + (trials - k) as f64 * (1.0 - p).ln())
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln()).exp()
}

/// One-sided exact (Clopper–Pearson) lower confidence bound on a success
/// probability.
pub fn binomial_lower_bound(successes: u64, trials: u64, confidence: f64) -> f64 {
    if successes == 0 {
        return 0.0;
    }
    let alpha = 1.0 - confidence;
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if binomial_upper_tail(successes, trials, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTest {
    pub agree: u64,
    pub total: u64,
    pub fraction: f64,
    /// One-sided exact binomial p-value against chance (0.5).
    pub p_value: f64,
    /// One-sided 95% lower bound on the agreement rate.
    pub lower_95: f64,
}

pub fn preference_test(agree: u64, total: u64) -> PreferenceTest {
    PreferenceTest {
        agree,
        total,
        fraction: agree as f64 / total.max(1) as f64,
        p_value: binomial_upper_tail(agree, total, 0.5),
        lower_95: binomial_lower_bound(agree, total, 0.95),
    }
}

/// Counts model pairs whose predicted order matches the ground-truth order
/// strictly; returns `(agree, total pairs)`.
pub fn pairwise_preferences(predicted: &[f64], truth: &[f64]) -> (u64, u64) {
    let mut agree = 0;
    let mut total = 0;
    for i in 0..predicted.len() {
        for j in i + 1..predicted.len() {
            total += 1;
            let p = predicted[i].total_cmp(&predicted[j]);
            let t = truth[i].total_cmp(&truth[j]);
            if p == t && p != std::cmp::Ordering::Equal {
                agree += 1;
            }
        }
    }
    (agree, total)
}
