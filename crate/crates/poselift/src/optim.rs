//! AdamW with decoupled weight decay.
//!
//! The decay term is applied directly to the parameter (`p -= lr * wd * p`)
//! rather than folded into the gradient, so the moment estimates see only
//! the true loss gradient. Bias correction follows the standard Adam
//! recipe. Parameters whose gradient is absent in a step are skipped
//! entirely — no decay, no moment update — which matches the convention
//! that an untouched parameter is not "seen" by the optimizer.
//!
//! The optimizer owns no schedule; callers adjust the learning rate between
//! epochs via [`AdamW::scale_lr`].

use crate::error::{numerical_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

struct Slot {
    name: String,
    param: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct AdamW {
    cfg: OptimConfig,
    lr: f64,
    step_count: u64,
    slots: Vec<Slot>,
}

impl AdamW {
    /// Build an optimizer over named parameters. The order defines the
    /// state layout, so callers should pass a deterministic ordering.
    pub fn new(cfg: OptimConfig, lr: f64, params: Vec<(String, Tensor)>) -> Self {
        let slots = params
            .into_iter()
            .map(|(name, param)| {
                let n = param.len();
                Slot { name, param, m: vec![0.0; n], v: vec![0.0; n] }
            })
            .collect();
        AdamW { cfg, lr, step_count: 0, slots }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Multiply the learning rate (exponential decay between epochs).
    pub fn scale_lr(&mut self, factor: f64) {
        self.lr *= factor;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update from the gradients currently accumulated on the
    /// parameters. Fails on non-finite gradients rather than poisoning the
    /// parameters silently.
    pub fn step(&mut self) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for slot in &mut self.slots {
            let Some(grad) = slot.param.grad() else {
                continue;
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(numerical_err!("non-finite gradient for parameter {}", slot.name));
            }
            let mut p = slot.param.to_vec();
            for i in 0..p.len() {
                let g = grad[i];
                slot.m[i] = self.cfg.beta1 * slot.m[i] + (1.0 - self.cfg.beta1) * g;
                slot.v[i] = self.cfg.beta2 * slot.v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                p[i] -= self.lr * self.cfg.weight_decay * p[i]
                    + self.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
            slot.param.set_data(&p);
        }
        Ok(())
    }

    /// Clear accumulated gradients on all managed parameters.
    pub fn zero_grad(&self) {
        for slot in &self.slots {
            slot.param.zero_grad();
        }
    }

    /// Moment estimates for checkpointing, in registration order.
    pub fn state(&self) -> impl Iterator<Item = (&str, &[f64], &[f64])> {
        self.slots.iter().map(|s| (s.name.as_str(), s.m.as_slice(), s.v.as_slice()))
    }

    /// Restore moment estimates saved by [`AdamW::state`]. Unknown names are
    /// ignored so a caller can restore a superset.
    pub fn restore(&mut self, step_count: u64, moments: &[(String, Vec<f64>, Vec<f64>)]) -> Result<()> {
        self.step_count = step_count;
        for (name, m, v) in moments {
            if let Some(slot) = self.slots.iter_mut().find(|s| &s.name == name) {
                if m.len() != slot.m.len() || v.len() != slot.v.len() {
                    return Err(numerical_err!(
                        "optimizer state for {name} has {} elements, parameter has {}",
                        m.len(),
                        slot.m.len()
                    ));
                }
                slot.m.copy_from_slice(m);
                slot.v.copy_from_slice(v);
            }
        }
        Ok(())
    }
}
