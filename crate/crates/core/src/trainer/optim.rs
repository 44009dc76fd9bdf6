//! Adagrad.

use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamId, ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct Adagrad {
    pub lr: f32,
    pub eps: f32,
    /// Accumulated squared gradients, one tensor per parameter.
    pub accum: Vec<Tensor<f32>>,
    /// Parameters clamped to `[-bound, bound]` after every step.
    clamped: Vec<(ParamId, f32)>,
}

impl Adagrad {
    pub fn new(store: &ParamStore<f32>, lr: f64, eps: f64) -> Self {
        Adagrad {
            lr: lr as f32,
            eps: eps as f32,
            accum: store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape().to_vec()))
                .collect(),
            clamped: Vec::new(),
        }
    }

    pub fn clamp_after_step(&mut self, id: ParamId, bound: f32) {
        self.clamped.push((id, bound));
    }

    /// `acc += g^2; p -= lr * g / (sqrt(acc) + eps)`. Frozen parameters are
    /// skipped.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>) -> Result<()> {
        if self.accum.len() != store.len() {
            return Err(Error::invalid("optimizer state does not match parameter store"));
        }
        for (id, g) in grads.iter() {
            if store.is_frozen(id) {
                continue;
            }
            let acc = &mut self.accum[id.index()];
            let p = store.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::shape("adagrad", g.shape(), p.shape()));
            }
            for ((p, a), &g) in p.data_mut().iter_mut().zip(acc.data_mut()).zip(g.data()) {
                let prev = *a;
                *a += g * g;
                debug_assert!(*a >= prev, "adagrad accumulator decreased");
                *p -= self.lr * g / (a.sqrt() + self.eps);
            }
        }
        for &(id, bound) in &self.clamped {
            for v in store.get_mut(id).data_mut() {
                *v = v.clamp(-bound, bound);
            }
        }
        Ok(())
    }
}
