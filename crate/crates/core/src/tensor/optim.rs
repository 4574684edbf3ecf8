use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct Adam<F = f32> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor<F>, Tensor<F>)>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients accumulated in `params`.
    pub fn step(&mut self, params: &mut ParamStore<F>, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        let (b1, b2) = (F::from_f64_lossy(beta1), F::from_f64_lossy(beta2));
        let (one_b1, one_b2) = (F::from_f64_lossy(1.0 - beta1), F::from_f64_lossy(1.0 - beta2));
        let step_size = F::from_f64_lossy(lr / bc1);
        let inv_bc2 = F::from_f64_lossy(1.0 / bc2);
        let eps = F::from_f64_lossy(eps);
        for (name, param, grad) in params.params_and_grads_mut() {
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p = *p - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: u64, base_lr: f64, warmup_steps: u64, total_steps: u64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let decay_len = total_steps.saturating_sub(warmup_steps);
    if decay_len == 0 {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / decay_len as f64;
    0.5 * base_lr * (1.0 + (PI * progress).cos())
}
