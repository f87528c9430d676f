use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

use super::config::OptimConfig;

/// Linear warm-up followed by polynomial decay to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub power: f64,
    pub warmup_start: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(cfg: &OptimConfig, total_steps: u64) -> Self {
        let warmup_steps = if total_steps == 0 {
            0
        } else {
            ((cfg.warmup_frac * total_steps as f64).ceil() as u64).min(total_steps - 1)
        };
        Self {
            base_lr: cfg.base_lr,
            power: cfg.power,
            warmup_start: cfg.warmup_start,
            warmup_steps,
            total_steps,
        }
    }

    /// Learning rate of the 0-based update `step`. Warm-up rises linearly
    /// from `warmup_start · base` to `base`; afterwards the rate follows
    /// `base · (1 − p)^power` with `p` the fraction of post-warm-up steps
    /// already taken.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            return self.base_lr * (self.warmup_start + (1.0 - self.warmup_start) * t);
        }
        let decay_steps = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let p = ((step - self.warmup_steps) as f64 / decay_steps as f64).min(1.0);
        self.base_lr * (1.0 - p).powf(self.power)
    }
}

/// Adam with decoupled weight decay. Decay applies to parameters with two
/// or more dimensions (weights), not to biases and norm parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: &OptimConfig, store: &ParamStore<S>) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![S::zero(); t.numel()]).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from the gradients held in `store`. Parameters
    /// without a gradient buffer are treated as having zero gradient.
    pub fn update(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::ConfigMismatch(format!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let c1 = S::lit(1.0 - self.beta1.powi(t));
        let c2 = S::lit(1.0 - self.beta2.powi(t));
        let (lr_s, eps, wd) = (S::lit(lr), S::lit(self.eps), S::lit(self.weight_decay));
        for ((tensor, m), v) in store.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = tensor.shape().len() >= 2;
            let (data, grad) = tensor.data_and_grad_mut();
            for i in 0..data.len() {
                let g = grad.map_or(S::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (S::one() - b1) * g;
                v[i] = b2 * v[i] + (S::one() - b2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                let mut delta = m_hat / (v_hat.sqrt() + eps);
                if decay {
                    delta += wd * data[i];
                }
                data[i] -= lr_s * delta;
            }
        }
        Ok(())
    }
}
