//! Directional information sufficiency, the pairwise score matrix over a
//! model pool, aggregation and ranking.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{check_pool_alignment, EmbeddingSet};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::numcore::{seeded_rng, Matrix};
use crate::training::{row_nlls, split_indices, train_conditional, train_marginal, SplitSpec, Stage, TrainConfig, TrainRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimates {
    /// Mean validation NLL of the marginal flow, in nats.
    pub h_v: f64,
    /// Mean validation NLL of the conditional flow, in nats.
    pub h_v_given_u: f64,
    /// `h_v - h_v_given_u`, unclamped.
    pub is: f64,
}

impl EntropyEstimates {
    /// Averages per-row NLLs computed on the same validation rows.
    pub fn from_row_nlls(marginal: &[f64], conditional: &[f64]) -> Result<Self> {
        if marginal.len() != conditional.len() {
            return Err(Error::Alignment(format!(
                "{} marginal rows vs {} conditional rows",
                marginal.len(),
                conditional.len()
            )));
        }
        if marginal.is_empty() {
            return Err(Error::InsufficientData("no validation rows".into()));
        }
        let n = marginal.len() as f64;
        let h_v = marginal.iter().sum::<f64>() / n;
        let h_v_given_u = conditional.iter().sum::<f64>() / n;
        if !(h_v.is_finite() && h_v_given_u.is_finite()) {
            return Err(Error::DensityEvaluation {
                layer: 0,
                context: "non-finite validation NLL".into(),
            });
        }
        Ok(Self {
            h_v,
            h_v_given_u,
            is: h_v - h_v_given_u,
        })
    }
}

/// `H(V) − H(V|U)` estimated on row-aligned validation data.
pub fn information_sufficiency(marginal: &FlowModel, conditional: &FlowModel, u_val: &Matrix, v_val: &Matrix) -> Result<EntropyEstimates> {
    if u_val.rows() != v_val.rows() {
        return Err(Error::Alignment(format!(
            "U has {} validation rows, V has {}",
            u_val.rows(),
            v_val.rows()
        )));
    }
    let m = row_nlls(marginal, v_val, None);
    let c = row_nlls(conditional, v_val, Some(u_val));
    EntropyEstimates::from_row_nlls(&m, &c)
}

/// How a row of normalized pairwise scores collapses to one number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Aggregation {
    Median,
    Mean,
    /// Drops `⌊f·n⌋` values from each end before averaging.
    Trimmed(f64),
}

pub const DEFAULT_TRIM: f64 = 0.10;

impl Aggregation {
    pub fn validate(&self) -> Result<()> {
        match self {
            Aggregation::Trimmed(f) if !(*f > 0.0 && *f < 0.5) => {
                Err(Error::Config(format!("trim fraction must lie in (0, 0.5), got {f}")))
            }
            _ => Ok(()),
        }
    }

    /// Aggregate of `values`; `None` when empty.
    pub fn apply(&self, values: &[f64]) -> Option<f64> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        // Offsets from the first value keep a constant row exactly constant.
        let mean = |s: &[f64]| s[0] + s.iter().map(|x| x - s[0]).sum::<f64>() / s.len() as f64;
        Some(match self {
            Aggregation::Median => {
                let n = v.len();
                if n % 2 == 1 {
                    v[n / 2]
                } else {
                    0.5 * (v[n / 2 - 1] + v[n / 2])
                }
            }
            Aggregation::Mean => mean(&v),
            Aggregation::Trimmed(f) => {
                let cut = (f * v.len() as f64).floor() as usize;
                mean(&v[cut..v.len() - cut])
            }
        })
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregation::Median => write!(f, "median"),
            Aggregation::Mean => write!(f, "mean"),
            Aggregation::Trimmed(x) => write!(f, "trimmed:{x}"),
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let method = match s.trim() {
            "median" => Aggregation::Median,
            "mean" => Aggregation::Mean,
            "trimmed" => Aggregation::Trimmed(DEFAULT_TRIM),
            other => match other.strip_prefix("trimmed:") {
                Some(f) => Aggregation::Trimmed(
                    f.parse()
                        .map_err(|_| Error::Config(format!("bad trim fraction in {other:?}")))?,
                ),
                None => return Err(Error::Config(format!("unknown aggregation {other:?}"))),
            },
        };
        method.validate()?;
        Ok(method)
    }
}

impl TryFrom<String> for Aggregation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Aggregation> for String {
    fn from(a: Aggregation) -> String {
        a.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFlag {
    pub source: String,
    pub target: String,
    pub reason: String,
}

/// Directional scores `IS(a → b)` over a pool; row = source, column = target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsMatrix {
    pub ids: Vec<String>,
    /// Target dimension per model.
    pub dims: Vec<usize>,
    /// Raw scores in nats; `None` on the diagonal and for flagged pairs.
    pub raw: Vec<Vec<Option<f64>>>,
    /// `raw[a][b] / dims[b]`, nats per dimension.
    pub normalized: Vec<Vec<Option<f64>>>,
    pub flags: Vec<PairFlag>,
}

impl IsMatrix {
    pub fn new(ids: Vec<String>, dims: Vec<usize>) -> Self {
        let k = ids.len();
        Self {
            ids,
            dims,
            raw: vec![vec![None; k]; k],
            normalized: vec![vec![None; k]; k],
            flags: Vec::new(),
        }
    }

    /// Builds a matrix from raw scores; the diagonal is ignored.
    pub fn from_raw(ids: Vec<String>, dims: Vec<usize>, raw: &[Vec<f64>]) -> Self {
        let mut m = Self::new(ids, dims);
        for (a, row) in raw.iter().enumerate() {
            for (b, &x) in row.iter().enumerate() {
                if a != b {
                    m.set(a, b, x);
                }
            }
        }
        m
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn set(&mut self, a: usize, b: usize, raw: f64) {
        assert_ne!(a, b, "diagonal entries are undefined");
        self.raw[a][b] = Some(raw);
        self.normalized[a][b] = Some(raw / self.dims[b] as f64);
    }

    pub fn flag(&mut self, a: usize, b: usize, reason: impl Into<String>) {
        self.raw[a][b] = None;
        self.normalized[a][b] = None;
        self.flags.push(PairFlag {
            source: self.ids[a].clone(),
            target: self.ids[b].clone(),
            reason: reason.into(),
        });
    }

    /// Normalized off-diagonal entries of row `a` restricted to `targets`,
    /// and the number of flagged entries skipped.
    pub fn row_values(&self, a: usize, targets: &[usize]) -> (Vec<f64>, usize) {
        let mut values = Vec::new();
        let mut omitted = 0;
        for &b in targets {
            if b == a {
                continue;
            }
            match self.normalized[a][b] {
                Some(x) => values.push(x),
                None => omitted += 1,
            }
        }
        (values, omitted)
    }

    /// Sub-matrix on the given model indices, in that order.
    pub fn subset(&self, keep: &[usize]) -> IsMatrix {
        let ids: Vec<String> = keep.iter().map(|&i| self.ids[i].clone()).collect();
        let mut m = IsMatrix::new(ids, keep.iter().map(|&i| self.dims[i]).collect());
        for (na, &a) in keep.iter().enumerate() {
            for (nb, &b) in keep.iter().enumerate() {
                m.raw[na][nb] = self.raw[a][b];
                m.normalized[na][nb] = self.normalized[a][b];
            }
        }
        m.flags = self
            .flags
            .iter()
            .filter(|f| m.ids.contains(&f.source) && m.ids.contains(&f.target))
            .cloned()
            .collect();
        m
    }

    /// Normalized matrix as CSV: header `source,<ids...>`, empty cells for
    /// undefined entries.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source");
        for id in &self.ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (a, id) in self.ids.iter().enumerate() {
            out.push_str(id);
            for x in &self.normalized[a] {
                out.push(',');
                if let Some(x) = x {
                    out.push_str(&format!("{x}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model_id: String,
    pub method: Aggregation,
    /// `None` when every row entry was flagged.
    pub score: Option<f64>,
    /// 1 is best; `None` for unscored models.
    pub rank: Option<usize>,
    /// True if another model has exactly the same score.
    pub tied: bool,
    /// Flagged row entries left out of the aggregate.
    pub omitted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedModel {
    pub model_id: String,
    pub score: f64,
    pub rank: usize,
    pub tied: bool,
}

/// Ranks by descending score, breaking ties by model id. Output follows the
/// input order.
pub fn rank_models(scores: &[(String, f64)]) -> Vec<RankedModel> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].1.total_cmp(&scores[i].1).then_with(|| scores[i].0.cmp(&scores[j].0)));
    let mut ranks = vec![0; scores.len()];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    scores
        .iter()
        .enumerate()
        .map(|(i, (id, s))| RankedModel {
            model_id: id.clone(),
            score: *s,
            rank: ranks[i],
            tied: scores.iter().enumerate().any(|(j, (_, t))| j != i && t == s),
        })
        .collect()
}

/// Aggregates each row over the given targets and ranks the sources.
pub fn aggregate_over(m: &IsMatrix, sources: &[usize], targets: &[usize], method: Aggregation) -> Vec<ModelScore> {
    let rows: Vec<(usize, Option<f64>, usize)> = sources
        .iter()
        .map(|&a| {
            let (values, omitted) = m.row_values(a, targets);
            (a, method.apply(&values), omitted)
        })
        .collect();
    let scored: Vec<(String, f64)> = rows
        .iter()
        .filter_map(|&(a, s, _)| s.map(|s| (m.ids[a].clone(), s)))
        .collect();
    let ranked = rank_models(&scored);
    rows.into_iter()
        .map(|(a, score, omitted)| {
            let r = ranked.iter().find(|r| r.model_id == m.ids[a]);
            ModelScore {
                model_id: m.ids[a].clone(),
                method,
                score,
                rank: r.map(|r| r.rank),
                tied: r.is_some_and(|r| r.tied),
                omitted,
            }
        })
        .collect()
}

/// Per-source aggregate of normalized scores over all other models.
pub fn aggregate_scores(m: &IsMatrix, method: Aggregation) -> Vec<ModelScore> {
    let all: Vec<usize> = (0..m.len()).collect();
    aggregate_over(m, &all, &all, method)
}

/// Settings for scoring a whole pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseConfig {
    pub flow: FlowConfig,
    pub marginal: TrainConfig,
    pub conditional: TrainConfig,
    pub split_ratio: f64,
    pub seed: u64,
    /// Concurrent training jobs.
    pub jobs: usize,
}

impl Default for PairwiseConfig {
    fn default() -> Self {
        Self {
            flow: FlowConfig::default(),
            marginal: TrainConfig::marginal(),
            conditional: TrainConfig::conditional(),
            split_ratio: 0.9,
            seed: 0,
            jobs: 1,
        }
    }
}

/// Identity of a training job plus a fingerprint of everything it depends on.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct JobKey {
    pub job_id: String,
    pub fingerprint: String,
}

/// Storage for trained models so reruns and pool extensions skip finished
/// jobs.
pub trait JobCache: Sync {
    fn load(&self, key: &JobKey) -> Option<(FlowModel, TrainRecord)>;
    fn store(&self, key: &JobKey, model: &FlowModel, record: &TrainRecord) -> Result<()>;
}

/// Cache that never hits.
pub struct NoCache;

impl JobCache for NoCache {
    fn load(&self, _: &JobKey) -> Option<(FlowModel, TrainRecord)> {
        None
    }

    fn store(&self, _: &JobKey, _: &FlowModel, _: &TrainRecord) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedJob {
    pub key: JobKey,
    pub model: FlowModel,
    pub record: TrainRecord,
    /// Per-row validation NLLs of `model`.
    pub val_nll: Vec<f64>,
    pub from_cache: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobFailure {
    pub job_id: String,
    pub reason: String,
}

/// Everything produced by scoring a pool.
#[derive(Debug, Clone)]
pub struct PairwiseRun {
    pub split: SplitSpec,
    pub matrix: IsMatrix,
    /// Keyed by target id.
    pub marginals: BTreeMap<String, TrainedJob>,
    /// Keyed by `(source id, target id)`.
    pub conditionals: BTreeMap<(String, String), TrainedJob>,
    pub failures: Vec<JobFailure>,
}

impl PairwiseRun {
    pub fn trained_jobs(&self) -> usize {
        self.marginals.values().chain(self.conditionals.values()).filter(|j| !j.from_cache).count()
    }

    pub fn total_jobs(&self) -> usize {
        self.marginals.len() + self.conditionals.len() + self.failures.len()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over a set's id, shape, corpus hash and values.
pub fn content_hash(emb: &EmbeddingSet) -> String {
    let mut h = Sha256::new();
    h.update(emb.model_id.as_bytes());
    h.update([0]);
    h.update(emb.corpus_hash.as_bytes());
    h.update((emb.n() as u64).to_le_bytes());
    h.update((emb.d() as u64).to_le_bytes());
    for x in emb.data.as_slice() {
        h.update(x.to_le_bytes());
    }
    hex(&h.finalize())
}

fn fingerprint(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex(&h.finalize())
}

/// Seed for a job, derived from the run seed and the job id only, so adding
/// models leaves existing jobs unchanged.
pub fn job_seed(root: u64, job_id: &str) -> u64 {
    seeded_rng(root).derive("job").derive(job_id).next_u64()
}

pub fn marginal_job_id(target: &str) -> String {
    format!("marginal/{target}")
}

pub fn conditional_job_id(source: &str, target: &str) -> String {
    format!("conditional/{source}->{target}")
}

fn stage_config(base: &TrainConfig, stage: Stage, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        stage,
        ..base.clone()
    }
}

fn run_jobs<T: Send, R: Send>(jobs: usize, items: Vec<T>, f: impl Fn(T) -> R + Sync + Send) -> Result<Vec<R>> {
    if jobs <= 1 {
        return Ok(items.into_iter().map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    Ok(pool.install(|| items.into_par_iter().map(f).collect()))
}

/// Trains one marginal flow per target and one conditional flow per ordered
/// pair, then fills the score matrix. Failed jobs are flagged, not fatal.
pub fn pairwise_is_matrix(pool: &[EmbeddingSet], config: &PairwiseConfig, cache: &dyn JobCache) -> Result<PairwiseRun> {
    if pool.len() < 2 {
        return Err(Error::InsufficientData("a pool needs at least two models".into()));
    }
    check_pool_alignment(pool)?;
    config.flow.validate()?;
    config.marginal.validate()?;
    config.conditional.validate()?;
    let split = split_indices(pool[0].n(), config.split_ratio, config.seed)?;
    let hashes: Vec<String> = pool.iter().map(content_hash).collect();
    let flow_json = serde_json::to_string(&config.flow)?;
    let split_json = serde_json::to_string(&(config.split_ratio, config.seed))?;
    let val: Vec<Matrix> = pool.iter().map(|e| e.select(&split.val)).collect();

    let marginal_results = run_jobs(config.jobs, (0..pool.len()).collect(), |b| -> Result<TrainedJob> {
        let job_id = marginal_job_id(&pool[b].model_id);
        let cfg = stage_config(&config.marginal, Stage::Marginal, job_seed(config.seed, &job_id));
        let key = JobKey {
            fingerprint: fingerprint(&[&job_id, &hashes[b], &flow_json, &serde_json::to_string(&cfg)?, &split_json]),
            job_id,
        };
        let (model, record, from_cache) = match cache.load(&key) {
            Some((m, r)) => (m, r, true),
            None => {
                let (m, r) = train_marginal(&pool[b], &split, &config.flow, &cfg)?;
                cache.store(&key, &m, &r)?;
                (m, r, false)
            }
        };
        let val_nll = row_nlls(&model, &val[b], None);
        Ok(TrainedJob {
            key,
            model,
            record,
            val_nll,
            from_cache,
        })
    })?;

    let mut failures = Vec::new();
    let mut marginals = BTreeMap::new();
    for (b, r) in marginal_results.into_iter().enumerate() {
        match r {
            Ok(job) => {
                marginals.insert(pool[b].model_id.clone(), job);
            }
            Err(e) => failures.push(JobFailure {
                job_id: marginal_job_id(&pool[b].model_id),
                reason: e.to_string(),
            }),
        }
    }
    let marginal_by_index: Vec<Option<&TrainedJob>> = pool.iter().map(|e| marginals.get(&e.model_id)).collect();

    let pairs: Vec<(usize, usize)> = (0..pool.len())
        .flat_map(|a| (0..pool.len()).filter(move |&b| b != a).map(move |b| (a, b)))
        .filter(|&(_, b)| marginal_by_index[b].is_some())
        .collect();
    let conditional_results = run_jobs(config.jobs, pairs.clone(), |(a, b)| -> Result<TrainedJob> {
        let marginal = marginal_by_index[b].expect("filtered above");
        let job_id = conditional_job_id(&pool[a].model_id, &pool[b].model_id);
        let cfg = stage_config(&config.conditional, Stage::Conditional, job_seed(config.seed, &job_id));
        let key = JobKey {
            fingerprint: fingerprint(&[
                &job_id,
                &hashes[a],
                &marginal.key.fingerprint,
                &serde_json::to_string(&cfg)?,
            ]),
            job_id,
        };
        let (model, record, from_cache) = match cache.load(&key) {
            Some((m, r)) => (m, r, true),
            None => {
                let (m, r) = train_conditional(&pool[a], &pool[b], &marginal.model, &split, &cfg)?;
                cache.store(&key, &m, &r)?;
                (m, r, false)
            }
        };
        let val_nll = row_nlls(&model, &val[b], Some(&val[a]));
        Ok(TrainedJob {
            key,
            model,
            record,
            val_nll,
            from_cache,
        })
    })?;

    let mut matrix = IsMatrix::new(
        pool.iter().map(|e| e.model_id.clone()).collect(),
        pool.iter().map(|e| e.d()).collect(),
    );
    for b in 0..pool.len() {
        if marginal_by_index[b].is_none() {
            for a in (0..pool.len()).filter(|&a| a != b) {
                matrix.flag(a, b, "marginal training failed");
            }
        }
    }
    let mut conditionals = BTreeMap::new();
    for ((a, b), r) in pairs.into_iter().zip(conditional_results) {
        let job = match r {
            Ok(job) => job,
            Err(e) => {
                failures.push(JobFailure {
                    job_id: conditional_job_id(&pool[a].model_id, &pool[b].model_id),
                    reason: e.to_string(),
                });
                matrix.flag(a, b, format!("conditional training failed: {e}"));
                continue;
            }
        };
        let marginal = marginal_by_index[b].expect("filtered above");
        match EntropyEstimates::from_row_nlls(&marginal.val_nll, &job.val_nll) {
            Ok(est) => matrix.set(a, b, est.is),
            Err(e) => matrix.flag(a, b, e.to_string()),
        }
        conditionals.insert((pool[a].model_id.clone(), pool[b].model_id.clone()), job);
    }
    Ok(PairwiseRun {
        split,
        matrix,
        marginals,
        conditionals,
        failures,
    })
}
