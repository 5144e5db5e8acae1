use std::path::Path;

use flowsuff_core::analysis::GroundTruth;
use flowsuff_core::data::EmbeddingSet;
use flowsuff_core::io::{
    read_ground_truth, read_pool, report_json, run_pipeline, run_pipeline_on, write_embeddings, write_report, DirCache,
    RunConfig, RunReport, REPORT_SCHEMA,
};
use flowsuff_core::sufficiency::NoCache;
use flowsuff_core::synth::{gen_synthetic_pool, SyntheticPoolSpec};

const SMALL: &str = r#"
seed = 7
preset = "desk"

[flow]
blocks = 2
hidden_width = 16

[marginal]
max_epochs = 4

[conditional]
max_epochs = 4
"#;

const ANALYSES: &str = r#"
[analysis]
bootstrap = true
preference = true
aggregations = ["mean"]
cond_only = true
shuffle = [0.0, 0.5, 1.0]
shuffle_repeats = 2
subsample = [0.5, 1.0]
subsample_repeats = 3
perturbation = [0.0, 0.01]
perturbation_draws = 2
diagnostics = true
bounds = true
probe_points = 4

[analysis.probe]
power_iters = 10
"#;

fn pool(models: usize) -> Vec<EmbeddingSet> {
    let spec = SyntheticPoolSpec {
        latent_dim: 2,
        output_dims: vec![3; models],
        noise_levels: (0..models).map(|i| 0.05 * 4f64.powi(i as i32)).collect(),
        n: 300,
        seed: 3,
    };
    gen_synthetic_pool(&spec).unwrap().pool
}

fn truth(pool: &[EmbeddingSet]) -> GroundTruth {
    let n = pool.len();
    GroundTruth::new(pool.iter().map(|e| e.model_id.clone()).collect(), (0..n).map(|i| (n - i) as f64).collect()).unwrap()
}

fn validate_schema(report: &RunReport) {
    let schema: serde_json::Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    let instance: serde_json::Value = serde_json::from_str(&report_json(report).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&instance).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

fn files_under(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files_under(&path).into_iter().map(|f| format!("{}/{f}", path.file_name().unwrap().to_string_lossy())));
        } else {
            out.push(path.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    out.sort();
    out
}

#[test]
fn scoring_only_run_writes_three_files() {
    let pool = pool(3);
    let config = RunConfig::from_toml(SMALL).unwrap();
    let report = run_pipeline_on(&pool, None, &config, &NoCache).unwrap();
    assert_eq!(report.scores.len(), 3);
    assert_eq!(report.jobs.len(), 3 + 6);
    assert!(report.jobs.iter().all(|j| j.record.wall_time_secs == 0.0));
    validate_schema(&report);

    let dir = tempfile::tempdir().unwrap();
    write_report(&report, dir.path()).unwrap();
    assert_eq!(files_under(dir.path()), ["is_matrix.csv", "report.json", "scores.csv"]);
    let scores = std::fs::read_to_string(dir.path().join("scores.csv")).unwrap();
    assert_eq!(scores.lines().next(), Some("model_id,score,rank,method"));
    assert_eq!(scores.lines().count(), 4);
}

#[test]
fn full_run_is_byte_identical_and_matches_schema() {
    let pool = pool(4);
    let gt = truth(&pool);
    let config = RunConfig::from_toml(&format!("{SMALL}{ANALYSES}")).unwrap();
    let a = run_pipeline_on(&pool, Some(&gt), &config, &NoCache).unwrap();
    let b = run_pipeline_on(&pool, Some(&gt), &config, &NoCache).unwrap();
    assert_eq!(report_json(&a).unwrap(), report_json(&b).unwrap());
    validate_schema(&a);

    assert!(a.correlation.is_some() && a.bootstrap.is_some() && a.preference.is_some(), "{:?}", a.warnings);
    assert_eq!(a.aggregations.len(), 1);
    assert!(a.cond_only.is_some());
    let names: Vec<&str> = a.curves.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names.len(), 2, "{names:?}");
    assert_eq!(a.perturbation.len(), 12);
    assert_eq!(a.diagnostics.len(), 16);
    assert_eq!(a.bounds.len(), 12);

    let dir = tempfile::tempdir().unwrap();
    write_report(&a, dir.path()).unwrap();
    let files = files_under(dir.path());
    for expected in ["bounds.csv", "curves/perturbation.csv", "is_matrix.csv", "report.json", "scores.csv"] {
        assert!(files.iter().any(|f| f == expected), "{expected} missing from {files:?}");
    }
    assert_eq!(files.iter().filter(|f| f.starts_with("curves/")).count(), 3);
}

#[test]
fn seed_changes_scores() {
    let pool = pool(3);
    let a = run_pipeline_on(&pool, None, &RunConfig::from_toml(SMALL).unwrap(), &NoCache).unwrap();
    let other = SMALL.replace("seed = 7", "seed = 8");
    let b = run_pipeline_on(&pool, None, &RunConfig::from_toml(&other).unwrap(), &NoCache).unwrap();
    assert_ne!(a.provenance.config_hash, b.provenance.config_hash);
    assert_ne!(report_json(&a).unwrap(), report_json(&b).unwrap());
}

#[test]
fn cache_reuses_jobs_when_a_model_is_added() {
    let big = pool(4);
    let config = RunConfig::from_toml(SMALL).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cache = DirCache::new(dir.path()).unwrap();
    let trained = |r: &RunReport| r.timings.iter().filter(|t| !t.from_cache).count();

    let first = run_pipeline_on(&big[..3], None, &config, &cache).unwrap();
    assert_eq!(trained(&first), 3 + 6);
    let again = run_pipeline_on(&big[..3], None, &config, &cache).unwrap();
    assert_eq!(trained(&again), 0);
    assert_eq!(report_json(&first).unwrap(), report_json(&again).unwrap());

    // One new marginal plus a conditional in each direction per old model.
    let grown = run_pipeline_on(&big, None, &config, &cache).unwrap();
    assert_eq!(trained(&grown), 1 + 2 * 3);
    assert_eq!(grown.jobs.len(), 4 + 12);
}

#[test]
fn pipeline_reads_files_named_in_config() {
    let pool = pool(3);
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("pool")).unwrap();
    for e in &pool {
        write_embeddings(&dir.path().join("pool").join(format!("{}.emb", e.model_id)), e).unwrap();
    }
    std::fs::write(dir.path().join("gt.csv"), "model_id,score\nsynth-0,3\nsynth-1,2\nsynth-2,1\n").unwrap();
    let toml = format!("pool_dir = \"pool\"\nground_truth = \"gt.csv\"\n{SMALL}");
    std::fs::write(dir.path().join("flowsuff.toml"), toml).unwrap();

    let config = RunConfig::load(&dir.path().join("flowsuff.toml")).unwrap();
    let from_files = run_pipeline(&config, &NoCache).unwrap();
    let gt = read_ground_truth(&dir.path().join("gt.csv")).unwrap();
    // Containers store f32, so compare against the re-read pool.
    let stored = read_pool(&config.pool_paths().unwrap()).unwrap();
    let direct = run_pipeline_on(&stored, Some(&gt), &config, &NoCache).unwrap();
    assert_eq!(report_json(&from_files).unwrap(), report_json(&direct).unwrap());
    assert!(from_files.correlation.is_some());
}

#[test]
fn single_model_pool_is_rejected() {
    let pool = pool(2);
    let dir = tempfile::tempdir().unwrap();
    write_embeddings(&dir.path().join("a.emb"), &pool[0]).unwrap();
    let config = RunConfig::from_toml(&format!("pool = [\"{}\"]\n{SMALL}", dir.path().join("a.emb").display())).unwrap();
    assert!(matches!(run_pipeline(&config, &NoCache), Err(flowsuff_core::Error::Config(_))));
}
