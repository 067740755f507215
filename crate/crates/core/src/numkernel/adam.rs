use serde::{Deserialize, Serialize};

use super::{check_len, ensure_finite};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        AdamState {
            config,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_len("AdamState::step (params)", self.first.len(), params.len())?;
        check_len("AdamState::step (grads)", self.first.len(), grads.len())?;
        ensure_finite("AdamState::step (grads)", grads)?;

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        ensure_finite("AdamState::step (params)", params)
    }
}
