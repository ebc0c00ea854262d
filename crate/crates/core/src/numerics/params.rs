use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dropout::{hash_str, mix};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Optimizer partition. `Lm` parameters get the LM learning rate and are
/// frozen during the first `freeze_lm_epochs` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Lm,
    Other,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Tensor<T>,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>, group: ParamGroup) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(tensor.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            grad,
            group,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    grad: p.grad.cast(),
                    group: p.group,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds `grads` (indexed like this store) into the stored gradients.
    pub fn accumulate(&mut self, grads: &Grads<T>) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            p.grad.add_assign(g);
        }
    }

    pub fn grads(&self) -> Grads<T> {
        Grads(self.params.iter().map(|p| p.grad.clone()).collect())
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_identical(&self, other: &ParamStore<T>) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.f64().to_bits() == y.f64().to_bits())
            })
    }
}

/// Dense gradients for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Grads<T>(pub Vec<Tensor<T>>);

impl<T: Real> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Grads(store.params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect())
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.0[id.0]
    }

    pub fn add(&mut self, other: &Grads<T>) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.0 {
            a.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }
}

/// Deterministic initializer: every tensor's values depend only on the run
/// seed and the parameter's name, never on creation order.
pub struct Initializer {
    seed: u64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix(self.seed, hash_str(name)))
    }

    /// Glorot-uniform matrix of shape `[fan_in, fan_out]`.
    pub fn xavier(&self, name: &str, fan_in: usize, fan_out: usize) -> Tensor<f32> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, &[fan_in, fan_out], bound)
    }

    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Tensor<f32> {
        let mut rng = self.rng(name);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
        Tensor::new(shape.to_vec(), data).expect("initializer shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(&[1, 2]), ParamGroup::Other).unwrap();
        assert!(s.add("a", Tensor::zeros(&[1, 2]), ParamGroup::Other).is_err());
    }

    #[test]
    fn init_depends_only_on_name() {
        let i = Initializer::new(7);
        assert_eq!(i.xavier("w", 3, 4), i.xavier("w", 3, 4));
        assert_ne!(i.xavier("w", 3, 4), i.xavier("v", 3, 4));
        assert_ne!(i.xavier("w", 3, 4), Initializer::new(8).xavier("w", 3, 4));
    }
}
