use crate::nn::{Grads, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates aligned with a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub steps: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { m: zeros.clone(), v: zeros, steps: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, cfg: &AdamConfig) {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let c1 = T::of(1.0 - cfg.beta1.powi(t));
        let c2 = T::of(1.0 - cfg.beta2.powi(t));
        let lr = T::of(cfg.learning_rate);
        let eps = T::of(cfg.eps);
        for (i, (param, grad)) in store.iter_mut().zip(grads.tensors()).enumerate() {
            if !param.kind.trainable() {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((p, &g), (mi, vi)) in param.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
