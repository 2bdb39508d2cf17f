use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Array2<f64>>,
    pub second: Vec<Array2<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &[Array2<f64>]) -> Self {
        let zeros = || params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        Self { config, step: 0, first: zeros(), second: zeros() }
    }
}

/// One AdamW update with bias-corrected moments and decoupled weight decay:
///
/// `p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)`
///
/// Gradients are checked before anything is modified; a NaN or infinity
/// leaves params and state untouched.
pub fn adamw_step(
    params: &mut [Array2<f64>],
    grads: &[Array2<f64>],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::shape(format!(
            "{} params, {} grads, {} moment tensors",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dim() != g.dim() || p.dim() != state.first[i].dim() {
            return Err(Error::shape(format!("tensor {i}: param {:?} grad {:?}", p.dim(), g.dim())));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { step: state.step as usize, tensor: format!("tensor {i}") });
        }
    }
    let AdamWConfig { beta1, beta2, eps, weight_decay } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
        });
    }
    Ok(())
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub base_lr: f64,
}

impl ScheduleConfig {
    pub fn new(warmup_steps: usize, total_steps: usize, base_lr: f64) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(Error::Config(format!("warmup {warmup_steps} exceeds total steps {total_steps}")));
        }
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {base_lr}")));
        }
        Ok(Self { warmup_steps, total_steps, base_lr })
    }
}

pub fn lr_at(step: usize, sched: &ScheduleConfig) -> Result<f64> {
    let ScheduleConfig { warmup_steps, total_steps, base_lr } = *sched;
    if step > total_steps {
        return Err(Error::StepOutOfRange { step, total: total_steps });
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let span = total_steps - warmup_steps;
    if span == 0 {
        return Ok(base_lr);
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    Ok(base_lr * 0.5 * (1.0 + (PI * progress).cos()))
}
