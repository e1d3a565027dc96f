use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::model::{ParamId, ParamStore};

/// Per-parameter gradient sums for one optimizer step.
#[derive(Clone, Debug)]
pub struct Gradients {
    slots: Vec<Option<Array>>,
}

impl Gradients {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            slots: vec![None; params.len()],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Array) {
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(grad),
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array> {
        self.slots[id.0].as_ref()
    }

    pub fn global_norm(&self) -> f64 {
        self.slots.iter().flatten().map(|g| g.sq_norm()).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if max_norm > 0.0 && norm > max_norm {
            let f = max_norm / norm;
            for g in self.slots.iter_mut().flatten() {
                g.scale(f);
            }
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Parameters that never received a gradient
/// keep no moment state and are never moved.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub settings: AdamSettings,
    pub step: u64,
    pub(crate) m: Vec<Option<Array>>,
    pub(crate) v: Vec<Option<Array>>,
}

impl Adam {
    pub fn new(settings: AdamSettings, params: &ParamStore) -> Self {
        Self {
            settings,
            step: 0,
            m: vec![None; params.len()],
            v: vec![None; params.len()],
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let AdamSettings { lr, beta1, beta2, eps } = self.settings;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for id in params.ids() {
            let Some(g) = grads.get(id) else { continue };
            let shape = g.shape().to_vec();
            let m = self.m[id.0].get_or_insert_with(|| Array::zeros(&shape));
            let v = self.v[id.0].get_or_insert_with(|| Array::zeros(&shape));
            let w = params.get_mut(id).data_mut();
            for (((w, m), v), g) in w.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}
