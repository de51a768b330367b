//! AdamW with decoupled weight decay and the warmed-up cosine schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::array::{Scalar, Tensor};
use super::params::{Gradients, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("step {step} outside [0, {total}]")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("warmup of {warmup} steps must be shorter than {total} total steps")]
    WarmupTooLong { warmup: u64, total: u64 },
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at
/// `total_steps`.
pub fn lr_at_step(
    step: u64,
    warmup_steps: u64,
    total_steps: u64,
    peak_lr: f64,
) -> Result<f64, ScheduleError> {
    if warmup_steps >= total_steps {
        return Err(ScheduleError::WarmupTooLong {
            warmup: warmup_steps,
            total: total_steps,
        });
    }
    if step > total_steps {
        return Err(ScheduleError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    if step < warmup_steps {
        return Ok(peak_lr * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment buffers for every parameter, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        OptimState {
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }
}

pub struct AdamW;

impl AdamW {
    /// One update. `config_for(i)` supplies the hyperparameters of
    /// parameter `i` (its group's learning rate and decay). Parameters
    /// without a gradient are treated as having a zero gradient when
    /// `allow_missing` is set, and rejected otherwise.
    pub fn step<T: Scalar>(
        params: &mut ParamStore<T>,
        grads: &Gradients<T>,
        state: &mut OptimState<T>,
        config_for: impl Fn(usize) -> AdamWConfig,
        allow_missing: bool,
    ) -> Result<(), ScheduleError> {
        if !allow_missing {
            if let Some((id, _)) = grads.iter().find(|(_, g)| g.is_none()) {
                return Err(ScheduleError::MissingGrad(params.param(id).name.clone()));
            }
        }
        state.step += 1;
        let t = state.step as f64;
        for (i, ((param, m), v)) in params
            .iter_mut()
            .zip(state.first.iter_mut())
            .zip(state.second.iter_mut())
            .enumerate()
        {
            let cfg = config_for(i);
            let bc1 = 1.0 - cfg.beta1.powf(t);
            let bc2 = 1.0 - cfg.beta2.powf(t);
            let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
            let lr = T::lit(cfg.lr);
            let decay = T::lit(1.0 - cfg.lr * cfg.weight_decay);
            let (bc1, bc2, eps) = (T::lit(bc1), T::lit(bc2), T::lit(cfg.eps));
            let grad = grads.get(super::params::ParamId(i)).map(|g| g.data());
            let p = param.value.data_mut();
            for j in 0..p.len() {
                let g = grad.map_or(T::zero(), |g| g[j]);
                let mj = b1 * m.data()[j] + (T::one() - b1) * g;
                let vj = b2 * v.data()[j] + (T::one() - b2) * g * g;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let update = (mj / bc1) / ((vj / bc2).sqrt() + eps);
                p[j] = p[j] * decay - lr * update;
            }
        }
        Ok(())
    }
}
