use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named collection of trainable tensors. Iteration order is the sorted name
/// order, which keeps checkpoints and updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::usage(format!("duplicate parameter name `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// `(name, shape)` pairs in store order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    /// Moves every entry of `other` into `self`.
    pub fn extend(&mut self, other: ParameterStore) -> Result<()> {
        for (name, t) in other.tensors {
            self.insert(name, t)?;
        }
        Ok(())
    }

    /// Removes and returns every entry whose name starts with `prefix`.
    pub fn split_off_prefix(&mut self, prefix: &str) -> ParameterStore {
        let names: Vec<String> = self
            .tensors
            .keys()
            .filter(|n| n.starts_with(prefix))
            .cloned()
            .collect();
        let mut out = ParameterStore::new();
        for n in names {
            let t = self.tensors.remove(&n).expect("listed key");
            out.tensors.insert(n, t);
        }
        out
    }
}
