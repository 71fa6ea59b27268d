use eomae_grad::{Gradients, Matrix, ParamStore};
use serde::{Deserialize, Serialize};

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
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Adam with decoupled weight decay.
///
/// Moments and parameters are rounded to f32 after every update so that a
/// checkpoint (stored as f32) captures the exact optimizer state.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| Matrix::zeros(store.get(id).rows(), store.get(id).cols())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// One update of every parameter that has a gradient; others are untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let decay = if store.decays(id) { lr * weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id);
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = round(beta1 * *m + (1.0 - beta1) * g);
                *v = round(beta2 * *v + (1.0 - beta2) * g * g);
                let step = (*m / c1) / ((*v / c2).sqrt() + eps);
                *p = round(*p - decay * *p - lr * step);
            }
        }
    }
}

fn round(x: f64) -> f64 {
    x as f32 as f64
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}
