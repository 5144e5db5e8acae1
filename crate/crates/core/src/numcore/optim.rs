//! AdamW with decoupled weight decay and literal gradient accumulation.

use serde::{Deserialize, Serialize};

use super::ParamTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of micro-batches whose gradients are summed before a step.
    pub accum_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            accum_steps: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was NaN or infinite; parameters were left untouched.
    SkippedNonFinite,
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: AdamWConfig,
    /// Current learning rate; schedulers overwrite this between steps.
    pub lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            lr: config.lr,
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn ensure_buffers(&mut self, params: &[&mut ParamTensor]) {
        let matches = self.m.len() == params.len()
            && self.m.iter().zip(params).all(|(m, p)| m.len() == p.len());
        if !matches {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
    }

    /// Applies one update using the accumulated gradients divided by
    /// `accum_steps`, then zeroes every gradient.
    pub fn adamw_step(&mut self, params: &mut [&mut ParamTensor]) -> StepOutcome {
        self.ensure_buffers(params);
        if !params.iter().all(|p| p.grad_is_finite()) {
            params.iter_mut().for_each(|p| p.zero_grad());
            return StepOutcome::SkippedNonFinite;
        }
        self.step += 1;
        let c = self.config;
        let scale = 1.0 / c.accum_steps.max(1) as f64;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let lr = self.lr;
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.values.len() {
                let g = p.grad[i] * scale;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let w = p.values[i];
                p.values[i] = w - lr * c.weight_decay * w - lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            p.zero_grad();
        }
        StepOutcome::Applied
    }
}
