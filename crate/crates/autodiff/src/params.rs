//! Named learnable parameters and their gradients.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub requires_grad: bool,
}

/// Flat registry of parameters addressed by [`ParamId`] or by unique name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: BTreeMap::new() }
    }

    /// Register a tensor. Panics on a duplicate name: parameter names are fixed at model build time.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, requires_grad: true });
        id
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.register(name, Tensor::zeros(shape))
    }

    pub fn full(&mut self, name: impl Into<String>, shape: &[usize], v: T) -> ParamId {
        self.register(name, Tensor::full(shape, v))
    }

    /// Uniform(−1/√fan_in, 1/√fan_in), the usual linear-layer initialisation.
    pub fn uniform_fan_in<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
        self.register(name, Tensor::raw(shape.to_vec(), data))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn set_requires_grad(&mut self, id: ParamId, on: bool) {
        self.params[id.0].requires_grad = on;
    }

    /// Freeze or unfreeze every parameter whose name starts with `prefix`.
    pub fn set_requires_grad_prefix(&mut self, prefix: &str, on: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.requires_grad = on;
        }
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Overwrite values from another store with the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .id(&p.name)
                .map(|id| other.value(id))
                .ok_or_else(|| TensorError::Checkpoint(format!("missing parameter {}", p.name)))?;
            if src.shape() != p.value.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    p.name,
                    p.value.shape(),
                    src.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

/// Gradient per parameter, dense over the whole store (unreached parameters hold zeros).
#[derive(Debug, Clone)]
pub struct GradMap<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradMap<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        GradMap { grads: store.params.iter().map(|_| None).collect() }
    }

    pub(crate) fn from_parts(grads: Vec<Option<Tensor<T>>>) -> Self {
        GradMap { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, zeros of `shape` when the parameter never reached the loss.
    pub fn get_or_zeros(&self, id: ParamId, shape: &[usize]) -> Tensor<T> {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn accumulate(&mut self, other: &GradMap<T>) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(s) = src {
                match dst {
                    Some(d) => d.data_mut().iter_mut().zip(s.data()).for_each(|(a, &b)| *a += b),
                    None => *dst = Some(s.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, k: T) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .fold(T::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }
}
