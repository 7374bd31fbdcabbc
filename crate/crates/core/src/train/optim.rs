use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGroup, Real, UpdateRule};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// `lr0 · ½(1 + cos(π · step / total_steps))`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

pub fn scheduled_lr(schedule: Schedule, step: u64, total_steps: u64, lr0: f64) -> f64 {
    match schedule {
        Schedule::Cosine => cosine_lr(step, total_steps, lr0),
        Schedule::Constant => lr0,
    }
}

/// `θ₂ ← τθ₂ + (1−τ)θ₁` elementwise over every tensor, evaluated as
/// `θ₁ + τ(θ₂ − θ₁)` so that `θ₁ = θ₂` and `τ = 0` are exact.
pub fn ema_update<T: Real>(target: &mut ParamGroup<T>, online: &ParamGroup<T>, tau: f64) -> Result<()> {
    if !target.same_layout(online) {
        return shape_err(format!(
            "EMA between {} and {} with different tensor layouts",
            target.name, online.name
        ));
    }
    let tau_t = T::of(tau);
    for (t, o) in target.tensors.iter_mut().zip(&online.tensors) {
        for (a, &b) in t.value.iter_mut().zip(&o.value) {
            *a = b + tau_t * (*a - b);
        }
    }
    Ok(())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments for every tensor of every group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Vec<Vec<T>>>,
    pub v: Vec<Vec<Vec<T>>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(groups: &[ParamGroup<T>]) -> Self {
        let zeros = |g: &ParamGroup<T>| g.tensors.iter().map(|t| vec![T::zero(); t.value.len()]).collect();
        AdamState {
            t: 0,
            m: groups.iter().map(zeros).collect(),
            v: groups.iter().map(zeros).collect(),
        }
    }

    /// Adam with decoupled weight decay on every `Backprop` group.
    pub fn step(&mut self, groups: &mut [ParamGroup<T>], lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
        let (one, eps) = (T::one(), T::of(ADAM_EPS));
        let (lr_t, wd) = (T::of(lr), T::of(weight_decay));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        for (gi, group) in groups.iter_mut().enumerate() {
            if group.update_rule != UpdateRule::Backprop {
                continue;
            }
            for (ti, tensor) in group.tensors.iter_mut().enumerate() {
                let m = &mut self.m[gi][ti];
                let v = &mut self.v[gi][ti];
                for i in 0..tensor.value.len() {
                    let grad = tensor.grad[i];
                    m[i] = b1 * m[i] + (one - b1) * grad;
                    v[i] = b2 * v[i] + (one - b2) * grad * grad;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    let w = tensor.value[i];
                    tensor.value[i] = w - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * w);
                }
            }
        }
    }
}
