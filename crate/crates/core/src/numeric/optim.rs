//! AdamW with decoupled weight decay and a warmup/linear-decay schedule.

use super::params::{Gradients, ParamGroup, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// AdamW coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter moment buffers and the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        OptimState {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// One AdamW update on a single tensor.
///
/// Decay is applied to the parameter directly (`w -= lr * wd * w`), never
/// through the moments. `step` is the 1-based update count used for bias
/// correction.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
    weight_decay: f64,
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        first[i] = cfg.beta1 * first[i] + (1.0 - cfg.beta1) * g;
        second[i] = cfg.beta2 * second[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = first[i] / bc1;
        let v_hat = second[i] / bc2;
        let w = param[i];
        param[i] = w - lr * weight_decay * w - lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Applies one AdamW step to every parameter with a gradient.
///
/// `lr_for` maps a parameter group to its learning rate for this step.
/// Parameters and moments are rounded to `f32` afterwards so that a
/// checkpoint written in single precision restores them exactly.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut OptimState,
    lr_for: impl Fn(ParamGroup) -> f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if !grads.all_finite() {
        let bad: Vec<String> = grads
            .iter()
            .filter(|(_, g)| g.is_some_and(|g| g.iter().any(|v| !v.is_finite())))
            .map(|(id, _)| store.get(id).name.clone())
            .collect();
        return Err(Error::numeric(format!(
            "non-finite gradient in {}; step skipped",
            bad.join(", ")
        )));
    }
    if state.first.len() != store.len() {
        return Err(Error::shape("optimizer state does not match parameters"));
    }
    state.step += 1;
    let step = state.step;
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let Some(g) = grads.get(id) else { continue };
        let (group, decay) = {
            let p = store.get(id);
            (p.group, p.decay)
        };
        let lr = lr_for(group);
        if lr < 0.0 {
            return Err(Error::argument("negative learning rate"));
        }
        let wd = if decay { cfg.weight_decay } else { 0.0 };
        let m = state.first[id.0].data_mut();
        let v = state.second[id.0].data_mut();
        let p = store.value_mut(id);
        adamw_update(p.data_mut(), g, m, v, step, lr, cfg, wd);
        p.round_to_f32();
        state.first[id.0].round_to_f32();
        state.second[id.0].round_to_f32();
    }
    Ok(())
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup_fraction: f64, total_steps: u64) -> Result<Self> {
        if peak_lr.is_nan() || peak_lr <= 0.0 {
            return Err(Error::argument("peak_lr must be positive"));
        }
        if !(0.0..=1.0).contains(&warmup_fraction) {
            return Err(Error::argument("warmup_fraction must lie in [0, 1]"));
        }
        if total_steps == 0 {
            return Err(Error::argument("total_steps must be positive"));
        }
        Ok(Schedule {
            peak_lr,
            warmup_fraction,
            total_steps,
        })
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).round() as u64
    }

    /// Learning rate at `step` in `0..=total_steps`.
    pub fn lr_at_step(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::argument(format!(
                "step {step} beyond schedule of {} steps",
                self.total_steps
            )));
        }
        let warm = self.warmup_steps();
        if step < warm {
            return Ok(self.peak_lr * step as f64 / warm as f64);
        }
        let decay = self.total_steps - warm;
        if decay == 0 {
            return Ok(self.peak_lr);
        }
        Ok(self.peak_lr * (self.total_steps - step) as f64 / decay as f64)
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
