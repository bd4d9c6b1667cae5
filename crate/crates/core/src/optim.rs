//! Adam with per-parameter state keyed by name.
//!
//! Parameters are updated only when they receive a gradient, so classes that
//! did not take part in a step keep their values and moments untouched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, slots: BTreeMap::new() }
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) {
        assert_eq!(param.shape(), grad.shape(), "gradient shape for `{name}`");
        let AdamConfig { beta1, beta2, eps } = self.config;
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
            m: Tensor::zeros(param.shape().to_vec()),
            v: Tensor::zeros(param.shape().to_vec()),
            step: 0,
        });
        slot.step += 1;
        let bc1 = 1.0 - beta1.powi(slot.step as i32);
        let bc2 = 1.0 - beta2.powi(slot.step as i32);
        let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
        for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }

    pub fn slots(&self) -> &BTreeMap<String, AdamSlot> {
        &self.slots
    }

    pub fn insert_slot(&mut self, name: String, slot: AdamSlot) {
        self.slots.insert(name, slot);
    }
}
