//! AdamW with decoupled weight decay and a linear-warmup cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::LmError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            warmup_steps: 10,
            total_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: &str| Err(LmError::Config(m.to_string()));
        if self.warmup_steps >= self.total_steps {
            return bad("warmup_steps must be < total_steps");
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("eps must be > 0 and weight_decay >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then half-cosine decay to zero at `total_steps`.
pub fn lr_at_step(cfg: &TrainConfig, step: usize) -> Result<f64, LmError> {
    if step > cfg.total_steps {
        return Err(LmError::StepOutOfRange {
            step,
            total: cfg.total_steps,
        });
    }
    if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return Ok(cfg.peak_lr);
        }
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    let lr = cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    Ok(lr.max(0.0))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    /// Number of updates applied so far.
    pub step: u64,
    /// First and second moments per tensor name.
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

/// One AdamW update of every tensor in `params` that has an entry in `grads`.
///
/// Tensors without a gradient are frozen and left untouched. Nothing is
/// modified when any gradient is non-finite.
pub fn adamw_step(
    params: Vec<(String, &mut [f64])>,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), LmError> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(LmError::NonFinite(format!("gradient of {name}")));
        }
    }
    let t = state.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (name, p) in params {
        let Some(g) = grads.get(&name) else { continue };
        if g.len() != p.len() {
            return Err(LmError::Shape(format!(
                "{name}: {} grads for {} params",
                g.len(),
                p.len()
            )));
        }
        let (m, v) = state
            .moments
            .entry(name)
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * cfg.weight_decay * p[i];
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    state.step = t;
    Ok(())
}
