use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{invalid, Result};

/// Named parameter tensors, iterated in sorted name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.map.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.map
            .get(name)
            .ok_or_else(|| invalid!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| invalid!("unknown parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<f32>> {
        self.map.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count over all tensors.
    pub fn num_elements(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            map: self
                .map
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Copies every entry of `other` in under `prefix`.
    pub fn absorb(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in &other.map {
            self.map.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Bitwise equality of all entries matching `filter`.
    pub fn bit_eq_where(&self, other: &ParamStore, filter: impl Fn(&str) -> bool) -> bool {
        let lhs: Vec<_> = self.map.iter().filter(|(k, _)| filter(k)).collect();
        let rhs: Vec<_> = other.map.iter().filter(|(k, _)| filter(k)).collect();
        lhs.len() == rhs.len()
            && lhs
                .iter()
                .zip(&rhs)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.bit_eq_where(other, |_| true)
    }
}

/// Fan-in uniform initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::rand_uniform(shape.to_vec(), -bound, bound, rng)
}
