use std::collections::BTreeMap;

use crate::params::{ParamId, ParamStore};
use crate::Tensor;

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients for frozen parameters are ignored.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (id, grad) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Tensor::zeros(grad.raw_dim()), Tensor::zeros(grad.raw_dim())));
            let p = store.get_mut(*id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    /// Moment tensors as named arrays, for checkpointing.
    pub fn export(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (id, (m, v)) in &self.moments {
            let name = store.name(*id);
            out.push((format!("adam.m.{name}"), m.clone()));
            out.push((format!("adam.v.{name}"), v.clone()));
        }
        out
    }

    /// Restores moments exported by [`Adam::export`].
    pub fn import(&mut self, store: &ParamStore, step: u64, tensors: &[(String, Tensor)]) {
        self.step = step;
        self.moments.clear();
        for (name, m) in tensors {
            let Some(pname) = name.strip_prefix("adam.m.") else { continue };
            let Some(id) = store.id_of(pname) else { continue };
            let vname = format!("adam.v.{pname}");
            if let Some((_, v)) = tensors.iter().find(|(n, _)| *n == vname) {
                self.moments.insert(id, (m.clone(), v.clone()));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, ArrayD, IxDyn};

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", arr1(&[3.0, -2.0]).into_dyn());
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = store.get(id).mapv(|x| 2.0 * x);
            opt.step(&mut store, &[(id, g)]);
        }
        assert!(store.get(id).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let id = store.add("x", ArrayD::ones(IxDyn(&[2])));
        store.set_trainable(id, false);
        let mut opt = Adam::new(0.1);
        opt.step(&mut store, &[(id, ArrayD::ones(IxDyn(&[2])))]);
        assert_eq!(store.get(id), &ArrayD::<f64>::ones(IxDyn(&[2])));
    }
}
