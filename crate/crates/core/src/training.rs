//! Two-stage flow training: a marginal flow on the target embeddings, then a
//! conditional flow warm-started from it.

use std::f64::consts::PI;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::flow::{build_flow, clone_to_conditional, FlowConfig, FlowModel};
use crate::numcore::{seeded_rng, AdamWConfig, EmaState, Matrix, OptimState, StepOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Marginal,
    Conditional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub max_epochs: usize,
    /// Epochs without a new best validation NLL before stopping.
    pub patience: usize,
    pub seed: u64,
    pub stage: Stage,
    /// Final learning rate as a fraction of `lr` under cosine decay.
    pub min_lr_ratio: f64,
    /// Consecutive bad epochs (NaN, or above `divergence_factor × |initial|`)
    /// that abort training.
    pub divergence_epochs: usize,
    pub divergence_factor: f64,
}

impl TrainConfig {
    pub fn marginal() -> Self {
        Self {
            lr: 2e-2,
            weight_decay: 1e-3,
            ema_decay: 0.999,
            batch_size: 256,
            accum_steps: 2,
            max_epochs: 1000,
            patience: 50,
            seed: 0,
            stage: Stage::Marginal,
            min_lr_ratio: 1e-4,
            divergence_epochs: 20,
            divergence_factor: 10.0,
        }
    }

    pub fn conditional() -> Self {
        Self {
            lr: 1e-1,
            batch_size: 64,
            accum_steps: 4,
            max_epochs: 500,
            stage: Stage::Conditional,
            ..Self::marginal()
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Marginal => Self::marginal(),
            Stage::Conditional => Self::conditional(),
        }
    }

    /// Settings that train stably on a few thousand rows in seconds: smaller
    /// batches, no accumulation, lower learning rates and a shorter EMA.
    pub fn desk(stage: Stage) -> Self {
        let lr = match stage {
            Stage::Marginal => 2e-3,
            Stage::Conditional => 1e-2,
        };
        Self {
            lr,
            ema_decay: 0.99,
            batch_size: 64,
            accum_steps: 1,
            max_epochs: 40,
            patience: 10,
            ..Self::for_stage(stage)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("ema_decay must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.accum_steps == 0 {
            return bad("batch_size and accum_steps must be positive");
        }
        if !(self.min_lr_ratio > 0.0 && self.min_lr_ratio <= 1.0) {
            return bad("min_lr_ratio must lie in (0, 1]");
        }
        if self.divergence_epochs == 0 || !(self.divergence_factor > 0.0) {
            return bad("divergence settings must be positive");
        }
        Ok(())
    }

    /// Cosine decay from `lr` to `min_lr_ratio·lr` over `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let min = self.lr * self.min_lr_ratio;
        let frac = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
        min + 0.5 * (self.lr - min) * (1.0 + (PI * frac.min(1.0)).cos())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::marginal()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
}

/// Shuffled train/validation split of `n` rows; `round(ratio·n)` rows train.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<SplitSpec> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let n_train = (ratio * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::InsufficientData(format!(
            "{n} rows cannot be split {ratio} into two non-empty parts"
        )));
    }
    let mut perm = seeded_rng(seed).derive("split").permutation(n);
    let val = perm.split_off(n_train);
    Ok(SplitSpec {
        train: perm,
        val,
        ratio,
        seed,
    })
}

pub fn split_dataset(emb: &EmbeddingSet, ratio: f64, seed: u64) -> Result<SplitSpec> {
    split_indices(emb.n(), ratio, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean mini-batch NLL during the epoch; absent for epoch 0.
    pub train_nll: Option<f64>,
    /// Validation NLL of the EMA weights at the end of the epoch.
    pub val_nll: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub stage: Stage,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Mean NLL of the returned model on the training rows.
    pub final_train_nll: f64,
    /// Mean NLL of the returned model on the validation rows.
    pub final_val_nll: f64,
    /// Largest per-row `|NLL|` on each split.
    pub m_train: f64,
    pub m_val: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub optimizer_steps: u64,
    pub skipped_steps: u64,
    pub wall_time_secs: f64,
}

impl TrainRecord {
    pub fn initial_val_nll(&self) -> f64 {
        self.epochs.first().map_or(f64::NAN, |e| e.val_nll)
    }
}

/// Row-aligned training and validation rows for one job.
pub struct TrainData<'a> {
    pub v_train: &'a Matrix,
    pub v_val: &'a Matrix,
    pub u_train: Option<&'a Matrix>,
    pub u_val: Option<&'a Matrix>,
}

/// Per-row NLLs; a non-finite density yields `NaN` for that row.
pub fn row_nlls(model: &FlowModel, v: &Matrix, u: Option<&Matrix>) -> Vec<f64> {
    (0..v.rows())
        .map(|i| {
            model
                .log_prob(v.row(i), u.map(|u| u.row(i)))
                .map_or(f64::NAN, |lp| -lp)
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes mean NLL of `model` on the training rows. Returns the EMA
/// weights from the epoch with the best validation NLL, rounded to `f32`.
pub fn train_flow(mut model: FlowModel, data: &TrainData<'_>, config: &TrainConfig) -> Result<(FlowModel, TrainRecord)> {
    config.validate()?;
    let start = Instant::now();
    let n_train = data.v_train.rows();
    if n_train == 0 || data.v_val.rows() == 0 {
        return Err(Error::InsufficientData("training and validation rows must be non-empty".into()));
    }
    let stage_label = match config.stage {
        Stage::Marginal => "marginal",
        Stage::Conditional => "conditional",
    };
    let mut rng = seeded_rng(config.seed).derive(stage_label);

    let initial_val = mean(&row_nlls(&model, data.v_val, data.u_val));
    if !initial_val.is_finite() {
        return Err(Error::TrainingFailure {
            job: stage_label.into(),
            reason: "initial validation NLL is not finite".into(),
        });
    }
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        train_nll: None,
        val_nll: initial_val,
        lr: config.lr,
    }];

    if !model.actnorm_initialized() {
        let first: Vec<usize> = rng.derive("actnorm").permutation(n_train)[..config.batch_size.min(n_train)].to_vec();
        let u_first = data.u_train.map(|u| u.select_rows(&first));
        model.data_init_actnorm(&data.v_train.select_rows(&first), u_first.as_ref())?;
    }

    let mut opt = OptimState::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        accum_steps: config.accum_steps,
        ..AdamWConfig::default()
    });
    let mut ema = EmaState::new(config.ema_decay, model.params());
    model.zero_grad();

    let batches_per_epoch = n_train.div_ceil(config.batch_size);
    let steps_per_epoch = batches_per_epoch.div_ceil(config.accum_steps);
    let total_steps = steps_per_epoch * config.max_epochs;
    let mut step_index = 0usize;
    let mut skipped = 0u64;

    let mut best_val = initial_val;
    let mut best_epoch = 0;
    let mut best_model = model.clone();
    let mut bad_epochs = 0;
    let divergence_threshold = config.divergence_factor * initial_val.abs().max(1.0);

    for epoch in 1..=config.max_epochs {
        let order = rng.permutation(n_train);
        let mut epoch_loss = 0.0;
        let mut epoch_rows = 0usize;
        let mut pending = 0usize;
        let mut pending_bad = false;
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for (bi, batch) in batches.iter().enumerate() {
            let w = 1.0 / batch.len() as f64;
            for &row in batch.iter() {
                match model.accumulate_nll_grad(data.v_train.row(row), data.u_train.map(|u| u.row(row)), w) {
                    Ok(nll) => {
                        epoch_loss += nll;
                        epoch_rows += 1;
                    }
                    Err(Error::DensityEvaluation { .. }) => pending_bad = true,
                    Err(e) => return Err(e),
                }
            }
            pending += 1;
            let last = bi + 1 == batches.len();
            if pending == config.accum_steps || last {
                if pending < config.accum_steps {
                    let scale = config.accum_steps as f64 / pending as f64;
                    for p in model.params_mut() {
                        p.grad.iter_mut().for_each(|g| *g *= scale);
                    }
                }
                opt.lr = config.lr_at(step_index, total_steps);
                let outcome = if pending_bad {
                    model.zero_grad();
                    StepOutcome::SkippedNonFinite
                } else {
                    opt.adamw_step(&mut model.params_mut())
                };
                if outcome == StepOutcome::SkippedNonFinite {
                    skipped += 1;
                }
                ema.update(model.params());
                step_index += 1;
                pending = 0;
                pending_bad = false;
            }
        }

        let mut ema_model = model.clone();
        ema.copy_to(ema_model.params_mut());
        let val_nll = mean(&row_nlls(&ema_model, data.v_val, data.u_val));
        epochs.push(EpochRecord {
            epoch,
            train_nll: Some(epoch_loss / epoch_rows.max(1) as f64),
            val_nll,
            lr: opt.lr,
        });

        if !val_nll.is_finite() || val_nll > divergence_threshold {
            bad_epochs += 1;
            if bad_epochs >= config.divergence_epochs {
                return Err(Error::TrainingFailure {
                    job: stage_label.into(),
                    reason: format!(
                        "diverged: validation NLL {val_nll} at epoch {epoch} (initial {initial_val}, best {best_val} at epoch {best_epoch}, {skipped} skipped steps)"
                    ),
                });
            }
        } else {
            bad_epochs = 0;
        }
        if val_nll < best_val {
            best_val = val_nll;
            best_epoch = epoch;
            best_model = ema_model;
        } else if epoch - best_epoch >= config.patience {
            break;
        }
    }

    best_model.round_to_f32();
    best_model.zero_grad();
    let train_rows = row_nlls(&best_model, data.v_train, data.u_train);
    let val_rows = row_nlls(&best_model, data.v_val, data.u_val);
    let record = TrainRecord {
        stage: config.stage,
        epochs,
        best_epoch,
        final_train_nll: mean(&train_rows),
        final_val_nll: mean(&val_rows),
        m_train: max_abs(&train_rows),
        m_val: max_abs(&val_rows),
        n_train,
        n_val: data.v_val.rows(),
        optimizer_steps: opt.step_count(),
        skipped_steps: skipped,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    if !record.final_val_nll.is_finite() || !record.final_train_nll.is_finite() {
        return Err(Error::TrainingFailure {
            job: stage_label.into(),
            reason: "selected model has a non-finite NLL".into(),
        });
    }
    Ok((best_model, record))
}

/// Fits a marginal flow `p(v)` on the training rows of `v`.
pub fn train_marginal(
    v: &EmbeddingSet,
    split: &SplitSpec,
    flow_config: &FlowConfig,
    config: &TrainConfig,
) -> Result<(FlowModel, TrainRecord)> {
    let v_train = v.select(&split.train);
    let v_val = v.select(&split.val);
    let mut model = build_flow(v.d(), flow_config, &seeded_rng(config.seed).derive("init"))?;
    model.fit_standardizer(&v_train)?;
    let data = TrainData {
        v_train: &v_train,
        v_val: &v_val,
        u_train: None,
        u_val: None,
    };
    train_flow(model, &data, config)
}

/// Warm-starts from `marginal` and fits `p(v | u)`.
pub fn train_conditional(
    u: &EmbeddingSet,
    v: &EmbeddingSet,
    marginal: &FlowModel,
    split: &SplitSpec,
    config: &TrainConfig,
) -> Result<(FlowModel, TrainRecord)> {
    if u.n() != v.n() {
        return Err(Error::Alignment(format!(
            "source {} has {} rows, target {} has {}",
            u.model_id,
            u.n(),
            v.model_id,
            v.n()
        )));
    }
    let u_train = u.select(&split.train);
    let u_val = u.select(&split.val);
    let v_train = v.select(&split.train);
    let v_val = v.select(&split.val);
    let mut model = clone_to_conditional(
        marginal,
        u.d(),
        marginal.config().rank,
        &seeded_rng(config.seed).derive("conditioner"),
    )?;
    model.fit_source_standardizer(&u_train)?;
    let data = TrainData {
        v_train: &v_train,
        v_val: &v_val,
        u_train: Some(&u_train),
        u_val: Some(&u_val),
    };
    train_flow(model, &data, config)
}
