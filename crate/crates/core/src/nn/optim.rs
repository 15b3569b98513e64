use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
///
/// Moment buffers are allocated lazily, and only for trainable parameters.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Parameters that currently own moment buffers.
    pub fn state_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.moments.keys().copied()
    }

    /// One update. `grads[i]` is the gradient of parameter `i`, `None` if unused.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - c.beta1), T::from_f64_lossy(1.0 - c.beta2));
        let lr_t = T::from_f64_lossy(lr);
        let decay = T::from_f64_lossy(1.0 - lr * c.weight_decay);
        let (bc1, bc2) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
        let eps = T::from_f64_lossy(c.eps);

        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id.index()).and_then(|g| g.as_ref()) else { continue };
            let shape = g.shape().to_vec();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(shape.clone()), Tensor::zeros(shape)));
            let p = store.get_mut(id);
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|x| x.to_f64().unwrap().powi(2))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && total > max_norm {
        let s = T::from_f64_lossy(max_norm / total);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    total
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineWarmup {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub peak_lr: f64,
}

impl CosineWarmup {
    pub fn new(warmup_steps: usize, total_steps: usize, peak_lr: f64) -> Result<Self> {
        if warmup_steps >= total_steps {
            return Err(Error::InvalidSchedule(format!(
                "warmup {warmup_steps} must be shorter than total {total_steps}"
            )));
        }
        if !(peak_lr.is_finite() && peak_lr >= 0.0) {
            return Err(Error::InvalidSchedule(format!("peak lr {peak_lr}")));
        }
        Ok(Self { warmup_steps, total_steps, peak_lr })
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        cosine_warmup_lr(step, self.warmup_steps, self.total_steps, self.peak_lr)
    }
}

pub fn cosine_warmup_lr(step: usize, warmup_steps: usize, total_steps: usize, peak_lr: f64) -> Result<f64> {
    if warmup_steps >= total_steps || step > total_steps {
        return Err(Error::InvalidSchedule(format!(
            "step {step}, warmup {warmup_steps}, total {total_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(peak_lr * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
