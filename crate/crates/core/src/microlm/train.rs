use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{adamw_step, lr_at_step, AdamState, TrainConfig};
use super::LmError;

/// Anything with named trainable tensors and a batched loss.
pub trait Trainable {
    fn n_examples(&self) -> usize;

    /// Mean loss over the batch and gradients keyed by trainable tensor name.
    fn loss_and_grads(&self, batch: &[usize])
        -> Result<(f64, BTreeMap<String, Vec<f64>>), LmError>;

    /// Every tensor that may be updated. Tensors absent from the gradient map
    /// returned by [`Trainable::loss_and_grads`] stay frozen.
    fn trainable_mut(&mut self) -> Vec<(String, &mut [f64])>;
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub points: Vec<(usize, f64)>,
}

impl LossCurve {
    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }

    /// `step,loss` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (s, l) in &self.points {
            out.push_str(&format!("{s},{l}\n"));
        }
        out
    }
}

/// Seeded epoch-shuffled batch order, `total_steps` batches long.
pub fn batch_schedule(
    n: usize,
    batch_size: usize,
    total_steps: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(total_steps);
    let bs = batch_size.min(n).max(1);
    while out.len() < total_steps {
        if order.len() < bs {
            let mut epoch: Vec<usize> = (0..n).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        out.push(order.drain(..bs).collect());
    }
    out
}

/// Runs the schedule from `state.step` up to `cfg.total_steps`.
///
/// `on_step` sees the step index and the batch loss after each update.
pub fn train<T: Trainable>(
    model: &mut T,
    state: &mut AdamState,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<LossCurve, LmError> {
    cfg.validate()?;
    let n = model.n_examples();
    if n == 0 {
        return Err(LmError::Config("no training examples".into()));
    }
    let batches = batch_schedule(n, cfg.batch_size, cfg.total_steps, cfg.seed);
    let mut curve = LossCurve::default();
    let start = state.step as usize;
    for (step, batch) in batches.iter().enumerate().skip(start) {
        let (loss, grads) = model.loss_and_grads(batch).map_err(|e| match e {
            LmError::NonFinite(what) => LmError::Divergence { step, reason: what },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(LmError::Divergence {
                step,
                reason: format!("loss {loss}"),
            });
        }
        let lr = lr_at_step(cfg, step)?;
        adamw_step(model.trainable_mut(), &grads, state, lr, cfg).map_err(|e| match e {
            LmError::NonFinite(what) => LmError::Divergence { step, reason: what },
            other => other,
        })?;
        curve.points.push((step, loss));
        on_step(step, loss);
    }
    Ok(curve)
}
