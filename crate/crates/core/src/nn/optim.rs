use std::collections::HashMap;

use super::graph::Gradients;
use super::params::{ParamId, ParamStore};
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub(crate) m: HashMap<ParamId, Tensor<F>>,
    pub(crate) v: HashMap<ParamId, Tensor<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Apply one update to every parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::c(self.beta1), F::c(self.beta2));
        let (ob1, ob2) = (F::c(1.0 - self.beta1), F::c(1.0 - self.beta2));
        let decay = F::c(1.0 - self.lr * self.weight_decay);
        let step_size = F::c(self.lr / bc1);
        let inv_sqrt_bc2 = F::c(1.0 / bc2.sqrt());
        let eps = F::c(self.eps);
        for (id, g) in grads.params() {
            let m = self.m.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.value_mut(id);
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                let denom = v.sqrt() * inv_sqrt_bc2 + eps;
                *p = *p * decay - step_size * *m / denom;
            }
        }
    }

    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>, &Tensor<F>)> {
        self.m
            .iter()
            .filter_map(|(id, m)| self.v.get(id).map(|v| (*id, m, v)))
    }

    pub fn set_moments(&mut self, id: ParamId, m: Tensor<F>, v: Tensor<F>) {
        self.m.insert(id, m);
        self.v.insert(id, v);
    }
}
