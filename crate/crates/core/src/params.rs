//! Named parameter registry and deterministic initializers.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by the optimizer.
    Trainable,
    /// Persistent state that is saved with the weights but never receives
    /// gradient (batch-norm running statistics).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub kind: ParamKind,
}

/// Flat registry of every parameter in a model, in construction order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad,
            kind,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.iter().filter(|(_, p)| p.kind == ParamKind::Trainable)
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|(_, p)| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, value) in updates {
            debug_assert_eq!(value.shape(), self.params[id.0].value.shape());
            self.params[id.0].value = value;
        }
    }

    /// Same registry in another precision (values cast, grads zeroed).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: Tensor::zeros(p.value.shape().to_vec()),
                    kind: p.kind,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Seeded initializer. Samples are drawn in f64 and cast, so an f32 and an
/// f64 model built from the same seed agree up to rounding.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<T: Real>(&mut self, shape: Vec<usize>, bound: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::cst(self.rng.gen_range(-bound..=bound)))
            .collect();
        Tensor::new(shape, data).expect("shape product")
    }

    /// He/Kaiming uniform with ReLU gain: U(-√(6/fan_in), √(6/fan_in)).
    pub fn kaiming_uniform<T: Real>(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
        self.uniform(shape, (6.0 / fan_in as f64).sqrt())
    }

    /// U(-1/√fan_in, 1/√fan_in), the usual default for dense projections.
    pub fn fan_in_uniform<T: Real>(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
        self.uniform(shape, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(vec![2]), ParamKind::Trainable).unwrap();
        assert!(s.add("a", Tensor::zeros(vec![2]), ParamKind::Trainable).is_err());
    }

    #[test]
    fn zero_grads_clears_everything() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::ones(vec![3]), ParamKind::Trainable).unwrap();
        s.get_mut(id).grad.fill(2.5);
        s.zero_grads();
        assert!(s.get(id).grad.data().iter().all(|&g| g == 0.0));
        assert_eq!(s.get(id).grad.shape(), s.get(id).value.shape());
    }
}
