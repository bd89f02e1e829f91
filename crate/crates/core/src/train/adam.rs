use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Bias-corrected Adam. Moments are indexed like the parameter registry;
/// buffers keep empty slots.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = |kind: ParamKind, shape: &[usize]| match kind {
            ParamKind::Trainable => Tensor::zeros(shape.to_vec()),
            ParamKind::Buffer => Tensor::zeros(vec![0]),
        };
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            step: 0,
            m: store.iter().map(|(_, p)| zeros(p.kind, p.value.shape())).collect(),
            v: store.iter().map(|(_, p)| zeros(p.kind, p.value.shape())).collect(),
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::cst(self.beta1), T::cst(self.beta2));
        let (one_b1, one_b2) = (T::cst(1.0 - self.beta1), T::cst(1.0 - self.beta2));
        let c1 = T::cst(1.0 - self.beta1.powi(t));
        let c2 = T::cst(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::cst(lr), T::cst(self.eps));
        for (id, p) in store.iter_mut() {
            if p.kind != ParamKind::Trainable {
                continue;
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let values = p.value.data_mut();
            for (((x, &g), mi), vi) in values
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x = *x - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.zero_grads();
    }
}
