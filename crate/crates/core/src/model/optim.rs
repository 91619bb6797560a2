use serde::{Deserialize, Serialize};

use super::{ModelError, NamedTensor, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
    /// Multiply the step size by `lr_gamma` every `lr_step_epochs` epochs
    /// (0 disables the schedule).
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            lr_step_epochs: 0,
            lr_gamma: 0.1,
        }
    }
}

impl AdamConfig {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if self.lr_step_epochs == 0 {
            self.lr
        } else {
            self.lr * self.lr_gamma.powi((epoch / self.lr_step_epochs) as i32)
        }
    }
}

/// Adam with per-parameter first and second moment estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[NamedTensor]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros_like(&p.value)).collect(),
            v: params.iter().map(|p| Tensor::zeros_like(&p.value)).collect(),
        }
    }

    /// One update with step size `lr`. Parameters whose gradient is `None`
    /// are left untouched.
    pub fn update(&mut self, params: &mut [NamedTensor], grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(grad) = &grads[i] else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = grad.data()[j] + c.weight_decay * *w;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            if !p.value.is_finite() {
                return Err(ModelError::NonFiniteParam {
                    name: p.name.clone(),
                    step: self.step,
                });
            }
        }
        Ok(())
    }
}
