use indexmap::IndexMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A named trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named parameters in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.insert(name.clone(), Parameter { name, value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::config(format!("no parameter named `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(T::zero());
        }
    }
}

/// Batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    /// Initial statistics: mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct StatStore<T> {
    stats: IndexMap<String, RunningStats<T>>,
}

impl<T: Scalar> StatStore<T> {
    pub fn new() -> Self {
        StatStore {
            stats: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, channels: usize) -> Result<()> {
        let name = name.into();
        if self.stats.contains_key(&name) {
            return Err(Error::config(format!("duplicate batch-norm name `{name}`")));
        }
        self.stats.insert(name, RunningStats::new(channels));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&RunningStats<T>> {
        self.stats.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut RunningStats<T>> {
        self.stats
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("no batch-norm statistics named `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RunningStats<T>)> {
        self.stats.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }
}
