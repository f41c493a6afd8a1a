//! Adam with optional cosine-with-warmup learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::nn::{to_f32_exact, GradBuffer, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear warmup over the first `warmup` fraction of steps, cosine decay to zero after.
    CosineWarmup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
    pub warmup: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, schedule: Schedule::Constant, warmup: 0.1 }
    }
}

impl OptimConfig {
    /// Learning rate at `step` (0-based) of a `total`-step run.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::CosineWarmup => {
                let total = total.max(1) as f64;
                let warm = (self.warmup * total).max(1.0);
                let s = step as f64;
                if s < warm {
                    self.lr * (s + 1.0) / warm
                } else {
                    let p = ((s - warm) / (total - warm).max(1.0)).min(1.0);
                    self.lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
                }
            }
        }
    }
}

/// Adam moment state aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimConfig,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: OptimConfig, store: &ParamStore) -> Self {
        Self { cfg, m: vec![None; store.len()], v: vec![None; store.len()], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update at learning rate `lr`. Only slots present in `grads` move.
    /// Updated values are rounded back to `f32` precision.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let Some(g) = grads.grads.get(i).and_then(Option::as_ref) else { continue };
            let m = self.m[i].get_or_insert_with(|| Mat::zeros(g.rows, g.cols));
            let v = self.v[i].get_or_insert_with(|| Mat::zeros(g.rows, g.cols));
            for (((w, gi), mi), vi) in p.value.data.iter_mut().zip(&g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = to_f32_exact(*w - lr * mhat / (vhat.sqrt() + eps));
            }
        }
    }
}
