//! Adam with bias correction, and the warmup-then-linear-decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self::with_hyper(store, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(store: &ParamStore, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// Applies one Adam update using the gradients stored on each parameter.
///
/// Parameters without a gradient buffer are treated as having a zero
/// gradient. Gradients are left in place; callers reset them.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, rate: f64) -> Result<()> {
    if state.first_moment.len() != store.len() {
        return Err(Error::Length {
            op: "adam_step",
            left: store.len(),
            right: state.first_moment.len(),
        });
    }
    for ((name, t), m) in store.iter().zip(&state.first_moment) {
        if m.len() != t.len() {
            return Err(Error::Length {
                op: "adam_step",
                left: t.len(),
                right: m.len(),
            });
        }
        if let Some(g) = &t.grad {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
    }
    if rate.is_nan() || rate < 0.0 {
        return Err(Error::Config(format!("learning rate {rate} must be >= 0")));
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((_, p), m), v) in store
        .iter_mut()
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        let grad = p.grad.take();
        let data = p.data_mut();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            data[i] -= rate * mhat / (vhat.sqrt() + eps);
        }
        p.grad = grad;
    }
    Ok(())
}

/// Linear warmup to `peak_rate`, then linear decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_rate: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(peak_rate: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        let s = Self {
            peak_rate,
            warmup_steps,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_rate > 0.0 && self.peak_rate.is_finite()) {
            return Err(Error::Config(format!("peak_rate {} must be > 0", self.peak_rate)));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be >= 1".into()));
        }
        if self.total_steps < self.warmup_steps {
            return Err(Error::Config(format!(
                "total_steps {} < warmup_steps {}",
                self.total_steps, self.warmup_steps
            )));
        }
        Ok(())
    }

    pub fn rate(&self, step: u64) -> f64 {
        lr_at(self, step)
    }
}

pub fn lr_at(schedule: &LrSchedule, step: u64) -> f64 {
    let LrSchedule {
        peak_rate,
        warmup_steps,
        total_steps,
    } = *schedule;
    if step > total_steps {
        log::warn!("step {step} is past the schedule end {total_steps}; using rate 0");
        return 0.0;
    }
    if step <= warmup_steps {
        peak_rate * (step as f64 / warmup_steps as f64)
    } else {
        peak_rate * ((total_steps - step) as f64 / (total_steps - warmup_steps) as f64)
    }
}
