use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Tensor2D;
use crate::error::{Error, Result};

/// Per-parameter Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: Tensor2D,
    pub v: Tensor2D,
    pub t: u64,
}

/// Adam with a constant learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: BTreeMap::new(),
        }
    }

    pub fn slots(&self) -> &BTreeMap<String, AdamSlot> {
        &self.slots
    }

    pub fn insert_slot(&mut self, name: String, slot: AdamSlot) {
        self.slots.insert(name, slot);
    }

    /// Applies one update to the named parameters using the store's
    /// accumulated gradients. Other parameters are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, names: &[String]) -> Result<()> {
        for name in names {
            let grad = store
                .grad(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?
                .clone();
            let (rows, cols) = grad.shape();
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: Tensor2D::zeros(rows, cols),
                v: Tensor2D::zeros(rows, cols),
                t: 0,
            });
            slot.t += 1;
            let bc1 = 1.0 - self.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.t as i32);
            let value = store.get_mut(name).expect("grad implies value");
            for (((p, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(slot.m.data_mut())
                .zip(slot.v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Rounds the moments of the named parameters to `f32`.
    pub fn round_to_f32(&mut self, names: &[String]) {
        for name in names {
            if let Some(slot) = self.slots.get_mut(name) {
                slot.m.round_to_f32();
                slot.v.round_to_f32();
            }
        }
    }
}

/// Rescales gradients of `names` so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, names: &[String], max_norm: f64) -> f64 {
    let total: f64 = names
        .iter()
        .filter_map(|n| store.grad(n))
        .map(Tensor2D::squared_norm)
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let k = max_norm / total;
        for name in names {
            store.scale_grad(name, k);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor2D::row_vector(&[1.0, -1.0]).unwrap()).unwrap();
        store
            .accumulate_grad("w", &Tensor2D::row_vector(&[2.0, -0.5]).unwrap())
            .unwrap();
        let mut adam = Adam::new(0.1);
        adam.step(&mut store, &["w".to_string()]).unwrap();
        let w = store.get("w").unwrap();
        assert!((w.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((w.get(0, 1) + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor2D::zeros(1, 2)).unwrap();
        store
            .accumulate_grad("a", &Tensor2D::row_vector(&[3.0, 4.0]).unwrap())
            .unwrap();
        let names = vec!["a".to_string()];
        let before = clip_grad_norm(&mut store, &names, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        let g = store.grad("a").unwrap();
        assert!((g.squared_norm().sqrt() - 1.0).abs() < 1e-12);
    }
}
