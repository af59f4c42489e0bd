//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::param::{ParamRole, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }
}

/// One Adam update of `values` in place.
pub fn adam_step<T: Real>(values: &mut [T], grads: &[T], state: &mut AdamState<T>, lr: f64, cfg: &AdamConfig) {
    debug_assert_eq!(values.len(), grads.len());
    debug_assert_eq!(values.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let bc1 = T::c(1.0 - cfg.beta1.powi(t));
    let bc2 = T::c(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::c(lr), T::c(cfg.eps));
    for (((p, &g), m), v) in values.iter_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam over a whole store. Only tensors with `requires_grad` participate;
/// a tensor joins (state created) the first time it is stepped.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub states: BTreeMap<String, AdamState<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: BTreeMap::new(),
        }
    }

    /// Applies one update using the gradients stored in `store`, with the
    /// learning rate chosen per role.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr_for: impl Fn(ParamRole) -> f64) {
        for (_, p) in store.iter_mut() {
            if !p.requires_grad || p.role == ParamRole::Buffer {
                continue;
            }
            let state = self
                .states
                .entry(p.name.clone())
                .or_insert_with(|| AdamState::new(p.values.len()));
            adam_step(&mut p.values, &p.grad, state, lr_for(p.role), &self.config);
        }
    }
}
