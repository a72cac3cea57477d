//! Adaptive-moment optimizer with decoupled weight decay, and the learning-rate schedule.

use alloc::vec::Vec;

use crate::error::{config_err, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(store: &ParamStore<F>, weight_decay: f64) -> Self {
        let zeros = |_| store.iter().map(|(_, p)| alloc::vec![F::zero(); p.value.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: zeros(()),
            second: zeros(()),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Parameters without a gradient keep
    /// their moments but still decay when marked for it.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &ParamGrads<F>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - self.beta1), F::of(1.0 - self.beta2));
        let (inv_c1, inv_c2) = (F::of(1.0 / c1), F::of(1.0 / c2));
        let eps = F::of(self.eps);
        let lr_f = F::of(lr);
        let decay = F::of(1.0 - lr * self.weight_decay);
        for (i, (param, (_, grad))) in store.iter_mut().zip(grads.iter()).enumerate() {
            let values = param.value.data_mut();
            if param.decay && self.weight_decay != 0.0 {
                values.iter_mut().for_each(|v| *v = *v * decay);
            }
            let Some(grad) = grad else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, &g) in grad.data().iter().enumerate() {
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                let mhat = m[j] * inv_c1;
                let vhat = v[j] * inv_c2;
                values[j] = values[j] - lr_f * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Per-step learning rate: linear warmup to `base` over `warmup_steps`, then
/// cosine decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(base: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if !(base >= 0.0 && base.is_finite()) {
            return Err(config_err("learning rate must be finite and non-negative"));
        }
        if total_steps == 0 || warmup_steps >= total_steps {
            return Err(config_err("warmup must be shorter than training"));
        }
        Ok(Self {
            base,
            warmup_steps,
            total_steps,
        })
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.base * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }
}
