//! AdamW with decoupled weight decay, plus a linear warmup/decay schedule.

use ndarray::Array2;

use crate::params::ParamStore;
use crate::tape::Gradients;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Clip threshold for the global gradient norm; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: Some(1.0),
        }
    }
}

struct Moment {
    m: Array2<f64>,
    v: Array2<f64>,
}

/// AdamW optimizer. Weight decay is decoupled from the gradient and skipped
/// for parameters whose name ends in `.bias`, `.gamma`, or `.beta`.
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    moments: Vec<Option<Moment>>,
    decay_mask: Vec<bool>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let decay_mask = store
            .iter()
            .map(|(_, name, _)| {
                !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
            })
            .collect();
        Self {
            cfg,
            step: 0,
            moments: (0..store.len()).map(|_| None).collect(),
            decay_mask,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `lr_scale` multiplies the base learning rate (schedules).
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Gradients, lr_scale: f64) -> f64 {
        self.step += 1;
        let norm = grads.global_norm();
        if let Some(max) = self.cfg.max_grad_norm {
            if norm > max && norm > 0.0 {
                grads.scale(max / norm);
            }
        }
        let lr = self.cfg.lr * lr_scale;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);

        for (id, grad) in grads.iter() {
            let idx = id.index();
            let slot = self.moments[idx].get_or_insert_with(|| Moment {
                m: Array2::zeros(grad.raw_dim()),
                v: Array2::zeros(grad.raw_dim()),
            });
            slot.m.zip_mut_with(grad, |m, &g| {
                *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g
            });
            slot.v.zip_mut_with(grad, |v, &g| {
                *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g
            });
            let decay = if self.decay_mask[idx] {
                self.cfg.weight_decay
            } else {
                0.0
            };
            let mut value = store.value_mut(id);
            ndarray::Zip::from(&mut value)
                .and(&slot.m)
                .and(&slot.v)
                .for_each(|w, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *w -= lr * (m_hat / (v_hat.sqrt() + self.cfg.eps) + decay * *w);
                });
        }
        norm
    }
}

/// Linear warmup to the base rate, then linear decay to zero.
#[derive(Debug, Clone, Copy)]
pub struct LinearSchedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LinearSchedule {
    /// Fraction of the base learning rate to apply at `step` (0-based).
    pub fn scale(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return 1.0;
        }
        let step = step.min(self.total_steps);
        if self.warmup_steps > 0 && step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else if self.total_steps == self.warmup_steps {
            1.0
        } else {
            let remaining = (self.total_steps - step) as f64;
            let span = (self.total_steps - self.warmup_steps) as f64;
            (remaining / span).max(0.0)
        }
    }
}
