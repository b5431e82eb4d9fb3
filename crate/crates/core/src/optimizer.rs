//! LARS with linear warmup and cosine decay for pretraining; SGD with
//! Nesterov momentum for linear probes.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub batch_size: usize,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("invalid base_lr {}", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then half-cosine decay to zero. Steps past the
/// end clamp to the final value.
pub fn cosine_lr(step: u64, cfg: &ScheduleConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps - cfg.warmup_steps;
    if span == 0 {
        return cfg.base_lr;
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    cfg.base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LarsConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Trust coefficient η.
    pub trust_coefficient: f64,
    /// Skip weight decay and trust scaling for rank-1 parameters (biases).
    pub exclude_rank1: bool,
}

impl Default for LarsConfig {
    fn default() -> Self {
        LarsConfig {
            momentum: 0.9,
            weight_decay: 1.5e-6,
            trust_coefficient: 1e-3,
            exclude_rank1: true,
        }
    }
}

impl LarsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.trust_coefficient > 0.0) {
            return Err(Error::Config(format!(
                "trust coefficient must be positive, got {}",
                self.trust_coefficient
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("negative weight decay {}", self.weight_decay)));
        }
        Ok(())
    }
}

fn check_inputs(params: &[&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim("optimizer", &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim("optimizer", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::Numeric("non-finite gradient; step aborted".into()));
        }
    }
    if !(lr >= 0.0) {
        return Err(Error::Config(format!("negative learning rate {lr}")));
    }
    Ok(())
}

/// LARS momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LarsState {
    pub momentum: Vec<Vec<f64>>,
}

impl LarsState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One LARS update. Nothing is written unless every gradient is finite.
pub fn lars_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    lr: f64,
    cfg: &LarsConfig,
    state: &mut LarsState,
) -> Result<()> {
    check_inputs(params, grads, lr)?;
    if state.momentum.is_empty() {
        state.momentum = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    }
    if state.momentum.len() != params.len() {
        return Err(Error::Contract("optimizer state does not match parameters".into()));
    }
    for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut state.momentum) {
        let excluded = cfg.exclude_rank1 && p.rank() <= 1;
        let decay = if excluded { 0.0 } else { cfg.weight_decay };
        let update: Vec<f64> = g
            .data()
            .iter()
            .zip(p.data())
            .map(|(g, w)| g + decay * w)
            .collect();
        let p_norm = p.norm();
        let u_norm = update.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ratio = if excluded || p_norm == 0.0 || u_norm == 0.0 {
            1.0
        } else {
            let r = cfg.trust_coefficient * p_norm / (u_norm + 1e-9);
            if r.is_finite() {
                r
            } else {
                1.0
            }
        };
        for ((w, buf), u) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(&update) {
            *buf = cfg.momentum * *buf + ratio * lr * u;
            *w -= *buf;
        }
    }
    Ok(())
}

/// Nesterov momentum buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    pub momentum: Vec<Vec<f64>>,
}

/// `m ← μ·m + g; p ← p − lr·(g + μ·m)`.
pub fn sgd_nesterov_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    lr: f64,
    momentum: f64,
    state: &mut SgdState,
) -> Result<()> {
    check_inputs(params, grads, lr)?;
    if state.momentum.is_empty() {
        state.momentum = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    }
    for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut state.momentum) {
        for ((w, buf), g) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(g.data()) {
            *buf = momentum * *buf + g;
            *w -= lr * (g + momentum * *buf);
        }
    }
    Ok(())
}
