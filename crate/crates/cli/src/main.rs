use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use flowsuff_core::analysis::{loo_bootstrap, paired_with_truth, rank_correlations, spearman_vs_truth, top3_overlap, GroundTruth};
use flowsuff_core::diagnostics::bound_table;
use flowsuff_core::io::{
    import_npy, read_embeddings, read_ground_truth, run_pipeline, write_embeddings, write_report, DirCache, Provenance, RunConfig,
    RunReport, RunStatus,
};
use flowsuff_core::sufficiency::{aggregate_scores, Aggregation, IsMatrix, ModelScore, DEFAULT_TRIM};
use flowsuff_core::synth::{gen_synthetic_pool, SyntheticPoolSpec};
use flowsuff_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_TRAINING: u8 = 4;
const EXIT_PARTIAL: u8 = 5;

/// Label-free ranking of embedding models by information sufficiency.
#[derive(Debug, Parser)]
#[command(name = "flowsuff", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed and FLOWSUFF_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Concurrent training jobs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a 2-D .npy array into an embedding container, or check containers.
    Ingest {
        /// .npy files to convert, or .emb files to check.
        inputs: Vec<PathBuf>,
        #[arg(long)]
        model_id: Option<String>,
        #[arg(long)]
        corpus_hash: Option<String>,
        /// Destination container (single input only).
        #[arg(long)]
        to: Option<PathBuf>,
    },
    /// Train all flows and write the score matrix and ranking.
    Score,
    /// Print the ranking stored in the report, optionally re-aggregated.
    Rank {
        #[arg(long)]
        aggregation: Option<Aggregation>,
    },
    /// Correlate the stored ranking with ground truth.
    Correlate {
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Leave-one-model-out ranking sensitivity.
    Bootstrap {
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Run one ablation.
    Ablate {
        kind: AblationKind,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Jacobian probes of every trained flow.
    Diagnose,
    /// Generalization bounds per pair.
    Bound,
    /// Write a synthetic pool with known informativeness order.
    Synth {
        #[arg(long, default_value_t = 8)]
        latent_dim: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 2000)]
        rows: usize,
        /// Per-model noise levels; one model per level.
        #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.1, 1.0, 10.0])]
        noise: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AblationKind {
    Shuffle,
    Subsample,
    Aggregation,
    CondOnly,
    Perturb,
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(Error::Config(_)) => EXIT_CONFIG,
            Failure::Core(e) if e.is_data_error() => EXIT_DATA,
            Failure::Core(Error::CorruptFile { .. } | Error::Json(_)) => EXIT_DATA,
            Failure::Core(_) => EXIT_TRAINING,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Usage(m) => write!(f, "{m}"),
        }
    }
}

type CliResult = Result<ExitCode, Failure>;

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => Failure::Usage(e.to_string()),
            e => e.into(),
        })?,
        None => {
            let mut c = RunConfig::default();
            c.apply_seed_env()?;
            c
        }
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output = out.clone();
    }
    if let Some(jobs) = cli.jobs {
        config.jobs = jobs;
    }
    config.validate()?;
    Ok(config)
}

fn ground_truth(config: &RunConfig, flag: &Option<PathBuf>) -> Result<Option<GroundTruth>, Failure> {
    match flag.as_ref().or(config.ground_truth.as_ref()) {
        Some(p) => Ok(Some(read_ground_truth(p)?)),
        None => Ok(None),
    }
}

fn require_gt(config: &RunConfig, flag: &Option<PathBuf>) -> Result<GroundTruth, Failure> {
    ground_truth(config, flag)?.ok_or_else(|| Failure::Usage("ground truth required: pass --ground-truth or set it in the config".into()))
}

/// The parts of a written report that later subcommands reuse.
#[derive(Debug, Deserialize)]
struct StoredReport {
    provenance: Provenance,
    matrix: IsMatrix,
    scores: Vec<ModelScore>,
}

fn read_report(config: &RunConfig) -> Result<StoredReport, Failure> {
    let path = config.output.join("report.json");
    let bytes = std::fs::read(&path).map_err(|e| {
        Failure::Usage(format!("cannot read {}: {e}; run `flowsuff score` first", path.display()))
    })?;
    serde_json::from_slice(&bytes).map_err(|e| {
        Failure::Core(Error::CorruptFile {
            path,
            reason: e.to_string(),
        })
    })
}

fn execute(config: &RunConfig) -> Result<RunReport, Failure> {
    let cache_dir = config.cache.clone().unwrap_or_else(|| {
        let mut name = config.output.file_name().unwrap_or_default().to_os_string();
        name.push(".cache");
        config.output.with_file_name(name)
    });
    let cache = DirCache::new(cache_dir)?;
    let report = run_pipeline(config, &cache)?;
    write_report(&report, &config.output)?;
    let trained = report.timings.iter().filter(|t| !t.from_cache).count();
    let secs: f64 = report.timings.iter().map(|t| t.wall_time_secs).sum();
    eprintln!(
        "{} jobs ({} trained, {} cached, {:.1}s training); report in {}",
        report.timings.len(),
        trained,
        report.timings.len() - trained,
        secs,
        config.output.display()
    );
    for f in &report.failures {
        eprintln!("job {} failed: {}", f.job_id, f.reason);
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(report)
}

fn status_code(report: &RunReport) -> ExitCode {
    match report.status {
        RunStatus::Complete => ExitCode::SUCCESS,
        RunStatus::Partial => ExitCode::from(EXIT_PARTIAL),
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.4}"))
}

fn print_scores(scores: &[ModelScore]) {
    let mut sorted: Vec<&ModelScore> = scores.iter().collect();
    sorted.sort_by_key(|s| (s.rank.is_none(), s.rank));
    println!("{:>4}  {:<32} {:>10}", "rank", "model", "score");
    for s in sorted {
        let rank = s.rank.map_or("-".into(), |r| r.to_string());
        let tie = if s.tied { " (tied)" } else { "" };
        println!("{rank:>4}  {:<32} {:>10}{tie}", s.model_id, fmt_opt(s.score));
    }
}

fn ingest(inputs: &[PathBuf], model_id: &Option<String>, corpus_hash: &Option<String>, to: &Option<PathBuf>) -> CliResult {
    if inputs.is_empty() {
        return Err(Failure::Usage("ingest needs at least one input file".into()));
    }
    if to.is_some() && inputs.len() != 1 {
        return Err(Failure::Usage("--to takes a single input".into()));
    }
    for input in inputs {
        if input.extension().is_some_and(|e| e == "npy") {
            let stem = input.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let id = model_id.clone().unwrap_or(stem);
            let hash = corpus_hash
                .clone()
                .ok_or_else(|| Failure::Usage("--corpus-hash is required when converting .npy files".into()))?;
            let set = import_npy(input, &id, &hash)?;
            let dest = to.clone().unwrap_or_else(|| input.with_extension("emb"));
            write_embeddings(&dest, &set)?;
            println!("{} -> {} ({} x {})", input.display(), dest.display(), set.n(), set.d());
        } else {
            let set = read_embeddings(input)?;
            println!("{}: model {} ({} x {}), corpus {}", input.display(), set.model_id, set.n(), set.d(), set.corpus_hash);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn correlate(report: &StoredReport, gt: &GroundTruth) -> CliResult {
    let (x, y) = paired_with_truth(&report.scores, gt);
    let c = rank_correlations(&x, &y)?;
    println!("models   {}", c.n);
    println!("spearman {}", fmt_opt(c.spearman));
    println!("pearson  {}", fmt_opt(c.pearson));
    let ranked: Vec<(String, f64)> = report.scores.iter().filter_map(|s| s.score.map(|v| (s.model_id.clone(), v))).collect();
    let truth: Vec<(String, f64)> = ranked.iter().filter_map(|(id, _)| gt.score_of(id).map(|s| (id.clone(), s))).collect();
    if let Ok(k) = top3_overlap(&truth, &ranked) {
        println!("top-3    {k}/3");
    }
    Ok(ExitCode::SUCCESS)
}

fn aggregation_table(m: &IsMatrix, gt: Option<&GroundTruth>) {
    for method in [Aggregation::Median, Aggregation::Mean, Aggregation::Trimmed(DEFAULT_TRIM), Aggregation::Trimmed(0.2)] {
        let scores = aggregate_scores(m, method);
        let rho = gt.and_then(|gt| spearman_vs_truth(&scores, gt));
        println!("{:<14} spearman {}", method.to_string(), fmt_opt(rho));
    }
}

fn synth(config: &RunConfig, latent_dim: usize, dim: usize, rows: usize, noise: &[f64]) -> CliResult {
    let mut spec = SyntheticPoolSpec::noise_ladder(latent_dim, dim, rows, config.seed);
    spec.noise_levels = noise.to_vec();
    spec.output_dims = vec![dim; noise.len()];
    let pool = gen_synthetic_pool(&spec)?;
    let out = &config.output;
    let pool_dir = out.join("pool");
    std::fs::create_dir_all(&pool_dir).map_err(|e| Error::Io {
        path: pool_dir.clone(),
        source: e,
    })?;
    let mut gt = String::from("model_id,score\n");
    for (set, q) in pool.pool.iter().zip(&pool.quality) {
        write_embeddings(&pool_dir.join(format!("{}.emb", set.model_id)), set)?;
        gt.push_str(&format!("{},{q}\n", set.model_id));
    }
    let write = |p: &Path, s: &str| {
        std::fs::write(p, s).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })
    };
    write(&out.join("ground_truth.csv"), &gt)?;
    let toml = format!(
        "pool_dir = \"pool\"\nground_truth = \"ground_truth.csv\"\noutput = \"report\"\ncache = \"cache\"\nseed = {}\npreset = \"desk\"\n\n[flow]\nhidden_width = 32\n",
        config.seed
    );
    write(&out.join("flowsuff.toml"), &toml)?;
    println!(
        "wrote {} models ({} x {}) to {}; run `flowsuff --config {} score`",
        pool.pool.len(),
        rows,
        dim,
        pool_dir.display(),
        out.join("flowsuff.toml").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> CliResult {
    let mut config = load_config(&cli)?;
    match &cli.command {
        Command::Ingest {
            inputs,
            model_id,
            corpus_hash,
            to,
        } => ingest(inputs, model_id, corpus_hash, to),
        Command::Score => {
            config.analysis = Default::default();
            let report = execute(&config)?;
            print_scores(&report.scores);
            Ok(status_code(&report))
        }
        Command::Rank { aggregation } => {
            let report = read_report(&config)?;
            match aggregation {
                Some(m) => print_scores(&aggregate_scores(&report.matrix, *m)),
                None => print_scores(&report.scores),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Correlate { ground_truth } => {
            let gt = require_gt(&config, ground_truth)?;
            correlate(&read_report(&config)?, &gt)
        }
        Command::Bootstrap { ground_truth } => {
            let gt = require_gt(&config, ground_truth)?;
            let report = read_report(&config)?;
            let loo = loo_bootstrap(&report.matrix, &gt, report.provenance.aggregation)?;
            println!("full     {}", fmt_opt(loo.rho_full));
            for r in &loo.replicates {
                println!("drop {:<24} {}", r.dropped, fmt_opt(r.rho));
            }
            println!("range    [{}, {}]", fmt_opt(loo.rho_min), fmt_opt(loo.rho_max));
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate { kind, ground_truth } => {
            if let Some(p) = ground_truth {
                config.ground_truth = Some(p.clone());
            }
            let a = &mut config.analysis;
            match kind {
                AblationKind::Aggregation => {
                    let gt = ground_truth_opt(&config)?;
                    aggregation_table(&read_report(&config)?.matrix, gt.as_ref());
                    return Ok(ExitCode::SUCCESS);
                }
                AblationKind::Shuffle if a.shuffle.is_empty() => a.shuffle = vec![0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0],
                AblationKind::Subsample if a.subsample.is_empty() => a.subsample = vec![0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0],
                AblationKind::Perturb if a.perturbation.is_empty() => a.perturbation = vec![0.01, 0.05, 0.1],
                AblationKind::CondOnly => a.cond_only = true,
                _ => {}
            }
            let report = execute(&config)?;
            for c in &report.curves {
                println!("{} ({} vs {})", c.name, c.statistic, c.control);
                for p in &c.points {
                    println!("  {:>6} {:>10} mean IS {}", p.control, fmt_opt(p.statistic), fmt_opt(p.mean_is));
                }
            }
            for p in &report.perturbation {
                for s in &p.stats {
                    println!("{} sigma {} median change {}", p.job_id, s.sigma, fmt_opt(s.median));
                }
            }
            if let Some(v) = &report.cond_only {
                println!("conditional-only ranking (spearman {})", fmt_opt(v.spearman));
                print_scores(&v.scores);
            }
            Ok(status_code(&report))
        }
        Command::Diagnose => {
            config.analysis.diagnostics = true;
            let report = execute(&config)?;
            println!("{:<32} {:>8} {:>10} {:>10} {:>10}", "flow", "sigma", "|cos|", "amp", "1+L*sigma");
            for d in &report.diagnostics {
                println!(
                    "{:<32} {:>8.4} {:>10} {:>10} {:>10.3}",
                    d.job_id,
                    d.sigma_bar.value,
                    fmt_opt(d.directions.as_ref().map(|x| x.mean_abs_cos)),
                    fmt_opt(d.total_amplification.as_ref().map(|x| x.mean)),
                    d.first_order_bound
                );
            }
            Ok(status_code(&report))
        }
        Command::Bound => {
            config.analysis.bounds = true;
            let report = execute(&config)?;
            let rows: Vec<(String, _)> = report
                .bounds
                .iter()
                .map(|b| (format!("{}->{}", b.source, b.target), b.report.clone()))
                .collect();
            print!("{}", bound_table(&rows));
            Ok(status_code(&report))
        }
        Command::Synth {
            latent_dim,
            dim,
            rows,
            noise,
        } => synth(&config, *latent_dim, *dim, *rows, noise),
    }
}

fn ground_truth_opt(config: &RunConfig) -> Result<Option<GroundTruth>, Failure> {
    ground_truth(config, &None)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
