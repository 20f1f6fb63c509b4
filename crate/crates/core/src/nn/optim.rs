use std::collections::BTreeMap;

use super::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self { beta1, beta2, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Applies one update with learning rate `lr` to every parameter that
    /// has a gradient in `grads`.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let one = T::one();
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = T::of(lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(self.eps);
        for (name, g) in grads {
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.param_mut(name);
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                *pi -= step_size * *mi / ((*vi).sqrt() / bc2_sqrt + eps);
            }
        }
    }
}
