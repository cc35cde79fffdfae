//! AdamW with decoupled weight decay and a linear warmup / linear decay
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
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
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Moment estimates, separable from the parameters for checkpointing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

pub struct AdamW {
    params: Vec<Tensor>,
    /// Weight decay applies only to matrices and kernels, not to biases or gains.
    decay: Vec<bool>,
    pub config: AdamWConfig,
    state: AdamWState,
}

impl AdamW {
    pub fn new(params: Vec<Tensor>, config: AdamWConfig) -> Self {
        let decay = params.iter().map(|p| p.ndim() >= 2).collect();
        let state = AdamWState {
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        };
        AdamW { params, decay, config, state }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn state(&self) -> &AdamWState {
        &self.state
    }

    pub fn load_state(&mut self, state: AdamWState) -> Result<()> {
        let shapes_match = state.first.len() == self.params.len()
            && state.second.len() == self.params.len()
            && self.params.iter().zip(&state.first).zip(&state.second).all(|((p, m), v)| m.len() == p.numel() && v.len() == p.numel());
        if !shapes_match {
            return Err(Error::Config("optimizer state does not match parameter shapes".into()));
        }
        self.state = state;
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Tensor::zero_grad);
    }

    /// Name of the first parameter index with a non-finite gradient.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.params.iter().position(|p| p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
    }

    /// One descent step; parameters without a gradient only decay.
    pub fn step(&mut self, lr: f64) {
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for (i, p) in self.params.iter().enumerate() {
            let grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            let (m, v) = (&mut self.state.first[i], &mut self.state.second[i]);
            let wd = if self.decay[i] { weight_decay } else { 0.0 };
            p.update_data(|data| {
                for j in 0..data.len() {
                    m[j] = beta1 * m[j] + (1.0 - beta1) * grad[j];
                    v[j] = beta2 * v[j] + (1.0 - beta2) * grad[j] * grad[j];
                    data[j] -= lr * wd * data[j];
                    data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                }
            });
        }
    }
}

/// Linear warmup from 0 to `base` over `warmup` steps, then linear decay
/// to 0 at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LinearSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            self.base * (step + 1) as f64 / self.warmup as f64
        } else if self.total <= self.warmup {
            self.base
        } else {
            let remaining = self.total.saturating_sub(step) as f64;
            self.base * remaining / (self.total - self.warmup) as f64
        }
    }
}
