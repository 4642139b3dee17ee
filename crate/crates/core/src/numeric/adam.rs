//! Adam with bias correction, one moment pair and step counter per parameter.

use serde::{Deserialize, Serialize};

use crate::numeric::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

/// Optimizer state for every parameter of one store, indexed by `ParamId`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub slots: Vec<AdamSlot>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let slots = store
            .iter()
            .map(|(_, p)| AdamSlot {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
                t: 0,
            })
            .collect();
        Self { slots }
    }

    pub fn slot(&self, id: ParamId) -> &AdamSlot {
        &self.slots[id.index()]
    }
}

/// One Adam update of every parameter selected by `filter`. Gradients are left
/// untouched; the caller zeroes them.
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    cfg: &AdamConfig,
    filter: impl Fn(ParamId) -> bool,
) {
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        if !filter(id) {
            continue;
        }
        let slot = &mut state.slots[id.index()];
        slot.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(slot.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(slot.t as i32);
        let p = store.get_mut(id);
        let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
        let grad = p.grad.data();
        let value = p.value.data_mut();
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}
