use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::GroundTruth;
use crate::diagnostics::ProbeSettings;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::sufficiency::{Aggregation, PairwiseConfig};
use crate::training::{Stage, TrainConfig};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "FLOWSUFF_SEED";

/// Base training settings before per-field overrides.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-scale settings for real embedding pools.
    #[default]
    Paper,
    /// Small batches and few epochs for laptop-sized pools.
    Desk,
}

/// Per-field overrides of a stage's training settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageOverrides {
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub ema_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub accum_steps: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub min_lr_ratio: Option<f64>,
    pub divergence_epochs: Option<usize>,
    pub divergence_factor: Option<f64>,
}

impl StageOverrides {
    pub fn apply(&self, mut c: TrainConfig) -> TrainConfig {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { c.$f = v; })*};
        }
        set!(lr, weight_decay, ema_decay, batch_size, accum_steps, max_epochs, patience, min_lr_ratio, divergence_epochs, divergence_factor);
        c
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsampleTarget {
    /// Ranking from the full validation set.
    #[default]
    Full,
    /// Supplied ground truth.
    GroundTruth,
}

fn default_shuffle_repeats() -> usize {
    3
}

fn default_subsample_repeats() -> usize {
    20
}

fn default_draws() -> usize {
    5
}

fn default_points() -> usize {
    16
}

fn default_delta() -> f64 {
    0.05
}

fn default_variance() -> f64 {
    0.95
}

/// Optional analyses run after scoring. Empty grids and `false` toggles
/// skip the analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Leave-one-out ranking sensitivity (needs ground truth).
    pub bootstrap: bool,
    /// Sign test over pairwise preferences (needs ground truth).
    pub preference: bool,
    /// Alternative aggregation rules to compare against the main one.
    pub aggregations: Vec<Aggregation>,
    /// Score with mean conditional log-likelihood only.
    pub cond_only: bool,
    /// Shuffle fractions `p`.
    pub shuffle: Vec<f64>,
    #[serde(default = "default_shuffle_repeats")]
    pub shuffle_repeats: usize,
    /// Subsample fractions `α`.
    pub subsample: Vec<f64>,
    /// Ranking each subsample is correlated with.
    pub subsample_reference: SubsampleTarget,
    #[serde(default = "default_subsample_repeats")]
    pub subsample_repeats: usize,
    /// Relative weight-noise scales applied to every conditional flow.
    pub perturbation: Vec<f64>,
    #[serde(default = "default_draws")]
    pub perturbation_draws: usize,
    /// Jacobian probes of every trained flow.
    pub diagnostics: bool,
    /// Generalization bounds per pair.
    pub bounds: bool,
    /// Validation rows used as probe points.
    #[serde(default = "default_points")]
    pub probe_points: usize,
    pub probe: ProbeSettings,
    #[serde(default = "default_delta")]
    pub bound_delta: f64,
    /// Explained-variance threshold for the effective dimension.
    #[serde(default = "default_variance")]
    pub variance_threshold: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            bootstrap: false,
            preference: false,
            aggregations: Vec::new(),
            cond_only: false,
            shuffle: Vec::new(),
            shuffle_repeats: default_shuffle_repeats(),
            subsample: Vec::new(),
            subsample_reference: SubsampleTarget::Full,
            subsample_repeats: default_subsample_repeats(),
            perturbation: Vec::new(),
            perturbation_draws: default_draws(),
            diagnostics: false,
            bounds: false,
            probe_points: default_points(),
            probe: ProbeSettings::default(),
            bound_delta: default_delta(),
            variance_threshold: default_variance(),
        }
    }
}

impl AnalysisConfig {
    pub fn is_empty(&self) -> bool {
        *self
            == Self {
                probe: self.probe,
                probe_points: self.probe_points,
                shuffle_repeats: self.shuffle_repeats,
                subsample_repeats: self.subsample_repeats,
                subsample_reference: self.subsample_reference,
                perturbation_draws: self.perturbation_draws,
                bound_delta: self.bound_delta,
                variance_threshold: self.variance_threshold,
                ..Self::default()
            }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("flowsuff-out")
}

fn default_jobs() -> usize {
    1
}

fn default_ratio() -> f64 {
    0.9
}

fn default_aggregation() -> Aggregation {
    Aggregation::Median
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Embedding containers, one per model. Relative paths resolve against
    /// the config file's directory.
    #[serde(default)]
    pub pool: Vec<PathBuf>,
    /// Directory whose `*.emb` files are appended to `pool` in name order.
    #[serde(default)]
    pub pool_dir: Option<PathBuf>,
    /// CSV with header `model_id,score`.
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Directory for trained-flow checkpoints; none disables caching.
    #[serde(default)]
    pub cache: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default = "default_aggregation")]
    pub aggregation: Aggregation,
    #[serde(default = "default_ratio")]
    pub split_ratio: f64,
    #[serde(default)]
    pub preset: Preset,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub marginal: StageOverrides,
    #[serde(default)]
    pub conditional: StageOverrides,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config is valid")
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(config)
    }

    /// Reads, resolves relative paths, applies the seed environment override
    /// and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        config.apply_seed_env()?;
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.pool.iter_mut().for_each(fix);
        for p in [&mut self.pool_dir, &mut self.ground_truth, &mut self.cache].into_iter().flatten() {
            fix(p);
        }
        fix(&mut self.output);
    }

    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        self.stage_config(Stage::Marginal).validate()?;
        self.stage_config(Stage::Conditional).validate()?;
        self.aggregation.validate()?;
        for a in &self.analysis.aggregations {
            a.validate()?;
        }
        self.analysis.probe.validate()?;
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split_ratio must lie in (0, 1), got {}", self.split_ratio)));
        }
        let a = &self.analysis;
        if let Some(p) = a.shuffle.iter().find(|p| !(**p >= 0.0 && **p <= 1.0)) {
            return Err(Error::Config(format!("shuffle fractions must lie in [0, 1], got {p}")));
        }
        if let Some(x) = a.subsample.iter().find(|x| !(**x > 0.0 && **x <= 1.0)) {
            return Err(Error::Config(format!("subsample fractions must lie in (0, 1], got {x}")));
        }
        if let Some(s) = a.perturbation.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("perturbation scales must be non-negative, got {s}")));
        }
        if a.shuffle_repeats == 0 || a.subsample_repeats == 0 || a.perturbation_draws == 0 {
            return Err(Error::Config("repeat counts must be at least 1".into()));
        }
        if (a.diagnostics || a.bounds) && a.probe_points == 0 {
            return Err(Error::Config("probe_points must be at least 1".into()));
        }
        if !(a.bound_delta > 0.0 && a.bound_delta < 1.0) {
            return Err(Error::Config(format!("bound_delta must lie in (0, 1), got {}", a.bound_delta)));
        }
        if !(a.variance_threshold > 0.0 && a.variance_threshold < 1.0) {
            return Err(Error::Config(format!("variance_threshold must lie in (0, 1), got {}", a.variance_threshold)));
        }
        Ok(())
    }

    pub fn stage_config(&self, stage: Stage) -> TrainConfig {
        let base = match self.preset {
            Preset::Paper => TrainConfig::for_stage(stage),
            Preset::Desk => TrainConfig::desk(stage),
        };
        match stage {
            Stage::Marginal => self.marginal.apply(base),
            Stage::Conditional => self.conditional.apply(base),
        }
    }

    pub fn pairwise(&self) -> PairwiseConfig {
        PairwiseConfig {
            flow: self.flow.clone(),
            marginal: self.stage_config(Stage::Marginal),
            conditional: self.stage_config(Stage::Conditional),
            split_ratio: self.split_ratio,
            seed: self.seed,
            jobs: self.jobs,
        }
    }

    /// Every pool file: explicit entries, then `pool_dir` contents by name.
    pub fn pool_paths(&self) -> Result<Vec<PathBuf>> {
        let mut out = self.pool.clone();
        if let Some(dir) = &self.pool_dir {
            let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "emb"))
                .collect();
            found.sort();
            out.extend(found);
        }
        Ok(out)
    }

    /// Hash of every setting that affects reported numbers. Paths are left
    /// out; inputs are identified by content hashes instead.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.pool.clear();
        c.pool_dir = None;
        c.ground_truth = None;
        c.output = PathBuf::new();
        c.cache = None;
        c.jobs = 1;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthRow {
    model_id: String,
    score: f64,
}

/// Reads a `model_id,score` CSV.
pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::CorruptFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    for row in reader.deserialize::<GroundTruthRow>() {
        let row = row.map_err(|e| Error::CorruptFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        ids.push(row.model_id);
        scores.push(row.score);
    }
    GroundTruth::new(ids, scores)
}
