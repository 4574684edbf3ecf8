use std::collections::BTreeMap;

use super::{shape_err, Real, Tensor, TensorError};

/// Gradients keyed by parameter name, as produced by one backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients<F = f32> {
    pub(crate) map: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub(crate) fn accumulate(&mut self, name: &str, grad: Tensor<F>) {
        match self.map.get_mut(name) {
            Some(g) => g.add_assign(&grad),
            None => {
                self.map.insert(name.to_string(), grad);
            }
        }
    }

    /// Adds every entry of `other` into `self`.
    pub fn merge(&mut self, other: &Self) {
        for (name, g) in &other.map {
            self.accumulate(name, g.clone());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }
}

/// Named model parameters with a gradient accumulator per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<F = f32> {
    params: BTreeMap<String, Tensor<F>>,
    grads: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new(), grads: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<(), TensorError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(shape_err("ParamStore::insert", format!("duplicate parameter {name:?}")));
        }
        self.grads.insert(name.clone(), Tensor::zeros(value.shape()));
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<F>> {
        self.grads.get(name)
    }

    /// Adds `grads` into the per-parameter accumulators.
    pub fn accumulate(&mut self, grads: &Gradients<F>) -> Result<(), TensorError> {
        for (name, g) in grads.iter() {
            let acc = self.grads.get_mut(name).ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            if acc.shape() != g.shape() {
                return Err(shape_err("accumulate", format!("{name}: {:?} vs {:?}", acc.shape(), g.shape())));
            }
            acc.add_assign(g);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = F::zero());
        }
    }

    pub(crate) fn params_and_grads_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>, &Tensor<F>)> {
        self.params.iter_mut().zip(self.grads.values()).map(|((n, p), g)| (n, p, g))
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            grads: self.grads.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}
