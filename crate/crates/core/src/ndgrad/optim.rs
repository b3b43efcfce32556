use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::scalar::Float;
use super::tensor::Tensor;

/// SGD with classical momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    pub momentum: T,
    velocity: HashMap<ParamId, Tensor<T>>,
}

impl<T: Float> SgdMomentum<T> {
    pub fn new(momentum: T) -> Self {
        assert!(momentum >= T::zero() && momentum < T::one(), "momentum must be in [0, 1)");
        Self {
            momentum,
            velocity: HashMap::new(),
        }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.velocity.get(&id)
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: T) {
        assert!(lr > T::zero(), "learning rate must be positive");
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let v = self
                .velocity
                .entry(*id)
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi + gi;
            }
            for (p, &vi) in store.get_mut(*id).data_mut().iter_mut().zip(v.data()) {
                *p -= lr * vi;
            }
        }
    }
}
