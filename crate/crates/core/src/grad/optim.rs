use std::collections::BTreeMap;

use super::graph::Gradients;
use super::params::{Group, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moments plus the number of updates applied to one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
}

/// AdamW with decoupled weight decay and per-group learning-rate multipliers.
///
/// Parameters that receive no gradient in a step are left untouched: no decay,
/// no moment update, no step count increment.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub lr_scale: BTreeMap<Group, f64>,
    pub state: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        let lr_scale = Group::ALL.iter().map(|&g| (g, 1.0)).collect();
        AdamW { config, lr_scale, state: vec![None; num_params] }
    }

    pub fn with_scales(mut self, scales: &[(Group, f64)]) -> Self {
        for &(g, s) in scales {
            self.lr_scale.insert(g, s);
        }
        self
    }

    pub fn group_lr(&self, group: Group) -> f64 {
        self.config.lr * self.lr_scale.get(&group).copied().unwrap_or(1.0)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let c = self.config;
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        for (id, grad) in grads.iter() {
            let (group, decay) = {
                let p = store.get(id);
                (p.group, p.decay)
            };
            let lr = self.group_lr(group);
            let value = store.value_mut(id);
            let st = self.state[id.index()].get_or_insert_with(|| Moments {
                step: 0,
                m: Tensor::zeros(value.rows(), value.cols()),
                v: Tensor::zeros(value.rows(), value.cols()),
            });
            st.step += 1;
            let bc1 = 1.0 - c.beta1.powi(st.step as i32);
            let bc2 = 1.0 - c.beta2.powi(st.step as i32);
            let shrink = if decay { 1.0 - lr * c.weight_decay } else { 1.0 };
            let (p, m, v, g) = (value.data_mut(), st.m.data_mut(), st.v.data_mut(), grad.data());
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] * shrink - lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}
