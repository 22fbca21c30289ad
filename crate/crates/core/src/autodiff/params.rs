use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameters in lexicographic order. Frozen entries never carry a
/// gradient accumulator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, Param { tensor, trainable });
        Ok(())
    }

    /// Insert or overwrite.
    pub fn set(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        self.entries.insert(name.into(), Param { tensor, trainable });
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        p.trainable = trainable;
        if !trainable {
            p.tensor.grad = None;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self, trainable_only: bool) -> usize {
        self.entries
            .values()
            .filter(|p| !trainable_only || p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Allocates a zeroed accumulator on every trainable entry and clears any
    /// stray accumulator on frozen ones.
    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            if p.trainable {
                p.tensor.zero_grad();
            } else {
                p.tensor.grad = None;
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.tensor.grad = None;
        }
    }

    pub fn grad(&self, name: &str) -> Option<&[f32]> {
        self.entries
            .get(name)
            .and_then(|p| p.tensor.grad.as_deref())
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &[f64]) {
        if let Some(p) = self.entries.get_mut(name) {
            if !p.trainable {
                return;
            }
            let acc = p
                .tensor
                .grad
                .get_or_insert_with(|| vec![0.0; g.len()]);
            for (a, &v) in acc.iter_mut().zip(g) {
                *a = (*a as f64 + v) as f32;
            }
        }
    }
}
