//! Adam, cosine annealing with warm restarts, and early stopping.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Gradients, ParamId, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("no gradient for trainable parameter `{0}`")]
    MissingGradient(String),
    #[error("gradient for `{name}` has {got} values, parameter has {want}")]
    GradientShape { name: String, got: usize, want: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

/// Learning-rate range and restart period, counted in epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub eta_max: f64,
    pub eta_min: f64,
    pub restart_period: usize,
    pub total_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { eta_max: 0.001, eta_min: 0.0, restart_period: 12, total_epochs: 47 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.eta_min >= 0.0 && self.eta_min < self.eta_max && self.eta_max.is_finite()) {
            return Err(OptimError::InvalidSchedule(format!(
                "need 0 <= eta_min < eta_max, got {} and {}",
                self.eta_min, self.eta_max
            )));
        }
        if self.restart_period == 0 {
            return Err(OptimError::InvalidSchedule("restart_period must be at least 1".into()));
        }
        if self.total_epochs == 0 {
            return Err(OptimError::InvalidSchedule("total_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// `η_min + ½(η_max − η_min)(1 + cos(π · T_cur / T_i))` with
/// `T_cur = epoch mod T_i`.
pub fn cosine_lr(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    let t_i = cfg.restart_period.max(1);
    let t_cur = (epoch % t_i) as f64;
    if t_cur == 0.0 {
        // exact at restarts; the formula can round one ulp below
        return cfg.eta_max;
    }
    cfg.eta_min + 0.5 * (cfg.eta_max - cfg.eta_min) * (1.0 + (PI * t_cur / t_i as f64).cos())
}

/// True once the lowest validation loss is at least `patience` epochs old.
///
/// The best epoch is the first occurrence of the minimum; `patience` later
/// epochs without a strict improvement trigger the stop.
pub fn early_stop(val_losses: &[f64], patience: usize) -> bool {
    best_epoch(val_losses).is_some_and(|best| val_losses.len() - 1 - best >= patience.max(1))
}

/// Index of the first minimum, ignoring NaNs.
pub fn best_epoch(val_losses: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &l) in val_losses.iter().enumerate() {
        if l.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| l < b) {
            best = Some((i, l));
        }
    }
    best.map(|(i, _)| i)
}

/// Adam moments for every parameter that has been stepped.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: BTreeMap<ParamId, Vec<f64>>,
    v: BTreeMap<ParamId, Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self { beta1, beta2, epsilon, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.m.get(&id).map(Vec::as_slice)
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.v.get(&id).map(Vec::as_slice)
    }

    /// One bias-corrected Adam update of every trainable parameter.
    /// Frozen parameters are skipped; gradients for them are ignored.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<(), OptimError> {
        let trainable = params.trainable_ids();
        for &id in &trainable {
            let p = params.get(id);
            let g = grads.get(id).ok_or_else(|| OptimError::MissingGradient(p.name.clone()))?;
            if g.len() != p.tensor().numel() {
                return Err(OptimError::GradientShape { name: p.name.clone(), got: g.len(), want: p.tensor().numel() });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in trainable {
            let g = grads.get(id).expect("checked above");
            let m = self.m.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            let values = params.get_mut(id).values_mut().expect("trainable parameter");
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<(), OptimError> {
    state.step(params, grads, lr)
}
