use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{hex, read_ground_truth, RunConfig, SubsampleTarget};
use super::container::read_pool;
use crate::analysis::{
    cond_only_matrix, loo_bootstrap, pairwise_preferences, paired_with_truth, preference_test, rank_correlations,
    shuffle_ablation, spearman_vs_truth, subsample_stability, top3_overlap, weight_perturbation_sweep, AblationCurve,
    CorrelationReport, GroundTruth, LooReport, PerturbationStats, PreferenceTest, RowNlls, SubsampleReference,
};
use crate::data::EmbeddingSet;
use crate::diagnostics::{
    bound_inputs_for, bound_report, direction_stats_from_probes, estimate_d_eff, flow_probe_points,
    layer_displacement_and_amplification, probe_all, sigma_bar_from_probes, total_amplification, BoundInputs,
    BoundReport, DirectionStats, DisplacementStats, ProbeSettings, SigmaBar,
};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::numcore::{seeded_rng, Matrix};
use crate::sufficiency::{
    aggregate_scores, content_hash, pairwise_is_matrix, Aggregation, IsMatrix, JobCache, JobFailure, ModelScore,
    PairwiseRun, TrainedJob,
};
use crate::training::TrainRecord;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub schema_version: u32,
    pub artifact_version: String,
    pub seed: u64,
    /// Hash of every setting that affects reported numbers.
    pub config_hash: String,
    pub aggregation: Aggregation,
    /// Content hash of each model's embeddings.
    pub inputs: BTreeMap<String, String>,
    /// Hash of the ground-truth table, when supplied.
    pub ground_truth: Option<String>,
    pub n_train: usize,
    pub n_val: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    /// Some jobs failed or some pairs were flagged.
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub correlation: CorrelationReport,
    pub top3_overlap: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVariant {
    pub method: String,
    pub scores: Vec<ModelScore>,
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationEntry {
    pub job_id: String,
    pub stats: Vec<PerturbationStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplificationSummary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowDiagnostics {
    pub job_id: String,
    pub layers: usize,
    pub points: usize,
    pub sigma_bar: SigmaBar,
    pub directions: Option<DirectionStats>,
    pub displacement: Option<DisplacementStats>,
    pub total_amplification: Option<AmplificationSummary>,
    /// `1 + L·σ̄`.
    pub first_order_bound: f64,
    /// Fraction of amplification samples at or below `first_order_bound`.
    pub bound_coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub source: String,
    pub target: String,
    pub d_eff: usize,
    pub marginal: BoundInputs,
    pub conditional: BoundInputs,
    pub report: BoundReport,
}

/// Training record of one job, without wall-clock time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobEntry {
    pub job_id: String,
    pub fingerprint: String,
    pub record: TrainRecord,
}

/// Run-local facts that are not part of the deterministic report.
#[derive(Debug, Clone, PartialEq)]
pub struct JobTiming {
    pub job_id: String,
    pub wall_time_secs: f64,
    pub from_cache: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub provenance: Provenance,
    pub status: RunStatus,
    pub matrix: IsMatrix,
    pub scores: Vec<ModelScore>,
    pub correlation: Option<CorrelationSummary>,
    pub bootstrap: Option<LooReport>,
    pub preference: Option<PreferenceTest>,
    pub aggregations: Vec<ScoreVariant>,
    pub cond_only: Option<ScoreVariant>,
    pub curves: Vec<AblationCurve>,
    pub perturbation: Vec<PerturbationEntry>,
    pub diagnostics: Vec<FlowDiagnostics>,
    pub bounds: Vec<BoundEntry>,
    pub jobs: Vec<JobEntry>,
    pub failures: Vec<JobFailure>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub timings: Vec<JobTiming>,
}

fn analysis_seed(root: u64, label: &str) -> u64 {
    seeded_rng(root).derive("analysis").derive(label).next_u64()
}

fn gt_hash(gt: &GroundTruth) -> String {
    hex(&Sha256::digest(serde_json::to_vec(gt).expect("ground truth serializes")))
}

/// Loads the pool and ground truth named in `config`, then runs every
/// configured stage.
pub fn run_pipeline(config: &RunConfig, cache: &dyn JobCache) -> Result<RunReport> {
    config.validate()?;
    let paths = config.pool_paths()?;
    if paths.len() < 2 {
        return Err(Error::Config(format!("a pool needs at least two models, got {}", paths.len())));
    }
    let pool = read_pool(&paths)?;
    let gt = config.ground_truth.as_deref().map(read_ground_truth).transpose()?;
    run_pipeline_on(&pool, gt.as_ref(), config, cache)
}

fn variant(m: &IsMatrix, method: Aggregation, gt: Option<&GroundTruth>) -> ScoreVariant {
    let scores = aggregate_scores(m, method);
    ScoreVariant {
        method: method.to_string(),
        spearman: gt.and_then(|gt| spearman_vs_truth(&scores, gt)),
        scores,
    }
}

struct FlowTarget<'a> {
    job: &'a TrainedJob,
    v: Matrix,
    u: Option<Matrix>,
}

fn probe_flow(
    target: &FlowTarget<'_>,
    settings: &ProbeSettings,
    full: bool,
    seed: u64,
) -> Result<FlowDiagnostics> {
    let model: &FlowModel = &target.job.model;
    let points = flow_probe_points(model, &target.v, target.u.as_ref())?;
    let settings = if full {
        *settings
    } else {
        ProbeSettings {
            subspace_dim: 0,
            ..*settings
        }
    };
    let probes = probe_all(model, &points, &settings, seed)?;
    let sigma_bar = sigma_bar_from_probes(&probes)?;
    let layers = model.num_atomic();
    let first_order_bound = 1.0 + layers as f64 * sigma_bar.value;
    let (directions, displacement, total, coverage) = if full {
        let total = total_amplification(model, &points, settings.amplification_eps, settings.directions, seed)?;
        let covered = total.samples.iter().filter(|&&s| s <= first_order_bound).count();
        (
            direction_stats_from_probes(model.dim(), &probes).ok(),
            Some(layer_displacement_and_amplification(model, &points, &settings, seed)?),
            Some(AmplificationSummary {
                mean: total.mean,
                std: total.std,
                min: total.min,
                max: total.max,
                samples: total.samples.len(),
            }),
            Some(covered as f64 / total.samples.len() as f64),
        )
    } else {
        (None, None, None, None)
    };
    Ok(FlowDiagnostics {
        job_id: target.job.key.job_id.clone(),
        layers,
        points: points.len(),
        sigma_bar,
        directions,
        displacement,
        total_amplification: total,
        first_order_bound,
        bound_coverage: coverage,
    })
}

/// Runs every configured stage on an in-memory pool.
pub fn run_pipeline_on(
    pool: &[EmbeddingSet],
    gt: Option<&GroundTruth>,
    config: &RunConfig,
    cache: &dyn JobCache,
) -> Result<RunReport> {
    config.validate()?;
    let run = pairwise_is_matrix(pool, &config.pairwise(), cache)?;
    let method = config.aggregation;
    let scores = aggregate_scores(&run.matrix, method);
    let scored = scores.iter().filter(|s| s.score.is_some()).count();
    if scored < 2 {
        let reason = run
            .failures
            .first()
            .map_or_else(|| "fewer than two models could be scored".to_string(), |f| f.reason.clone());
        return Err(Error::TrainingFailure {
            job: "pool".into(),
            reason,
        });
    }
    let mut warnings = Vec::new();
    let a = &config.analysis;
    let needs_gt = |what: &str, warnings: &mut Vec<String>| {
        if gt.is_none() {
            warnings.push(format!("{what} skipped: no ground truth supplied"));
        }
        gt
    };

    let correlation = match gt {
        Some(gt) => {
            let (x, y) = paired_with_truth(&scores, gt);
            let ranked: Vec<(String, f64)> = scores.iter().filter_map(|s| s.score.map(|v| (s.model_id.clone(), v))).collect();
            let truth: Vec<(String, f64)> = ranked
                .iter()
                .filter_map(|(id, _)| gt.score_of(id).map(|s| (id.clone(), s)))
                .collect();
            Some(CorrelationSummary {
                correlation: rank_correlations(&x, &y)?,
                top3_overlap: top3_overlap(&truth, &ranked).ok(),
            })
        }
        None => None,
    };

    let bootstrap = if a.bootstrap {
        match needs_gt("bootstrap", &mut warnings) {
            Some(gt) => match loo_bootstrap(&run.matrix, gt, method) {
                Ok(r) => Some(r),
                Err(e) => {
                    warnings.push(format!("bootstrap skipped: {e}"));
                    None
                }
            },
            None => None,
        }
    } else {
        None
    };

    let preference = if a.preference {
        needs_gt("preference test", &mut warnings).map(|gt| {
            let (x, y) = paired_with_truth(&scores, gt);
            let (agree, total) = pairwise_preferences(&x, &y);
            preference_test(agree, total)
        })
    } else {
        None
    };

    let aggregations = a.aggregations.iter().map(|&m| variant(&run.matrix, m, gt)).collect();
    let cond_only = a.cond_only.then(|| variant(&cond_only_matrix(&run), method, gt));

    let mut curves = Vec::new();
    if !a.shuffle.is_empty() {
        curves.push(shuffle_ablation(&run, pool, &a.shuffle, a.shuffle_repeats, gt, method, analysis_seed(config.seed, "shuffle"))?);
    }
    if !a.subsample.is_empty() {
        let reference = match a.subsample_reference {
            SubsampleTarget::Full => Some(SubsampleReference::FullRanking),
            SubsampleTarget::GroundTruth => needs_gt("subsample stability", &mut warnings).map(SubsampleReference::GroundTruth),
        };
        if let Some(reference) = reference {
            let rows = RowNlls::from_run(&run);
            let curve = subsample_stability(&rows, &a.subsample, a.subsample_repeats, reference, method, analysis_seed(config.seed, "subsample"))?;
            warnings.extend(curve.warnings.iter().cloned());
            curves.push(curve);
        }
    }

    let index: BTreeMap<&str, usize> = pool.iter().enumerate().map(|(i, e)| (e.model_id.as_str(), i)).collect();
    let val = |i: usize| pool[i].select(&run.split.val);

    let mut perturbation = Vec::new();
    if !a.perturbation.is_empty() {
        let seed = analysis_seed(config.seed, "perturbation");
        for ((src, tgt), job) in &run.conditionals {
            let stats = weight_perturbation_sweep(
                &job.model,
                &a.perturbation,
                a.perturbation_draws,
                &val(index[tgt.as_str()]),
                Some(&val(index[src.as_str()])),
                seed,
            )?;
            perturbation.push(PerturbationEntry {
                job_id: job.key.job_id.clone(),
                stats,
            });
        }
    }

    let mut diagnostics = Vec::new();
    let mut sigma: BTreeMap<String, f64> = BTreeMap::new();
    if a.diagnostics || a.bounds {
        let k = a.probe_points.min(run.split.val.len());
        let rows = &run.split.val[..k];
        let seed = analysis_seed(config.seed, "probe");
        let mut targets: Vec<FlowTarget<'_>> = run
            .marginals
            .iter()
            .map(|(id, job)| FlowTarget {
                job,
                v: pool[index[id.as_str()]].select(rows),
                u: None,
            })
            .collect();
        targets.extend(run.conditionals.iter().map(|((src, tgt), job)| FlowTarget {
            job,
            v: pool[index[tgt.as_str()]].select(rows),
            u: Some(pool[index[src.as_str()]].select(rows)),
        }));
        for t in &targets {
            match probe_flow(t, &a.probe, a.diagnostics, seed) {
                Ok(d) => {
                    sigma.insert(d.job_id.clone(), d.sigma_bar.value);
                    if a.diagnostics {
                        diagnostics.push(d);
                    }
                }
                Err(e) => warnings.push(format!("probes of {} failed: {e}", t.job.key.job_id)),
            }
        }
    }

    let mut bounds = Vec::new();
    if a.bounds {
        let mut d_eff: BTreeMap<&str, usize> = BTreeMap::new();
        for id in run.marginals.keys() {
            let train = pool[index[id.as_str()]].select(&run.split.train);
            d_eff.insert(id.as_str(), estimate_d_eff(&train, a.variance_threshold)?);
        }
        for ((src, tgt), job) in &run.conditionals {
            let marginal = &run.marginals[tgt];
            let (Some(&s_m), Some(&s_c)) = (sigma.get(&marginal.key.job_id), sigma.get(&job.key.job_id)) else {
                warnings.push(format!("bound for {src}->{tgt} skipped: missing probes"));
                continue;
            };
            let de = d_eff[tgt.as_str()];
            let with_delta = |b: BoundInputs| BoundInputs {
                delta: a.bound_delta,
                ..b
            };
            let mi = with_delta(bound_inputs_for(&marginal.model, &marginal.record, s_m, de as f64));
            let ci = with_delta(bound_inputs_for(&job.model, &job.record, s_c, de as f64));
            bounds.push(BoundEntry {
                source: src.clone(),
                target: tgt.clone(),
                d_eff: de,
                marginal: mi,
                conditional: ci,
                report: bound_report(&marginal.record, &job.record, &mi, &ci)?,
            });
        }
    }

    let (jobs, timings) = job_entries(&run);
    let status = if run.failures.is_empty() && run.matrix.flags.is_empty() {
        RunStatus::Complete
    } else {
        RunStatus::Partial
    };
    Ok(RunReport {
        provenance: Provenance {
            schema_version: REPORT_SCHEMA_VERSION,
            artifact_version: ARTIFACT_VERSION.into(),
            seed: config.seed,
            config_hash: config.fingerprint(),
            aggregation: method,
            inputs: pool.iter().map(|e| (e.model_id.clone(), content_hash(e))).collect(),
            ground_truth: gt.map(gt_hash),
            n_train: run.split.train.len(),
            n_val: run.split.val.len(),
        },
        status,
        matrix: run.matrix,
        scores,
        correlation,
        bootstrap,
        preference,
        aggregations,
        cond_only,
        curves,
        perturbation,
        diagnostics,
        bounds,
        jobs,
        failures: run.failures,
        warnings,
        timings,
    })
}

fn job_entries(run: &PairwiseRun) -> (Vec<JobEntry>, Vec<JobTiming>) {
    let all = run.marginals.values().chain(run.conditionals.values());
    let mut jobs = Vec::new();
    let mut timings = Vec::new();
    for job in all {
        let mut record = job.record.clone();
        timings.push(JobTiming {
            job_id: job.key.job_id.clone(),
            wall_time_secs: record.wall_time_secs,
            from_cache: job.from_cache,
        });
        record.wall_time_secs = 0.0;
        jobs.push(JobEntry {
            job_id: job.key.job_id.clone(),
            fingerprint: job.key.fingerprint.clone(),
            record,
        });
    }
    (jobs, timings)
}
