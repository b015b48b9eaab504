//! Named parameter collections.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One named weight tensor plus its pruning eligibility.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub prunable: bool,
}

/// Gradients (or any per-parameter tensors) keyed by parameter name.
pub type TensorMap = BTreeMap<String, Tensor>;

/// A named collection of dense tensors. Iteration is in name order, which
/// makes every reduction over a `ParamSet` deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, prunable: bool) {
        self.entries.insert(name.into(), Param { value, prunable });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.remove(name)
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

    pub fn prunable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|(_, p)| p.prunable).map(|(k, p)| (k, &p.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn prunable_count(&self) -> usize {
        self.entries.values().filter(|p| p.prunable).map(|p| p.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.is_finite())
    }

    /// Moves every entry of `other` into `self`, replacing same-named entries.
    pub fn extend(&mut self, other: ParamSet) {
        self.entries.extend(other.entries);
    }

    /// Splits off the entries whose names start with `prefix`.
    pub fn split_prefix(&mut self, prefix: &str) -> ParamSet {
        let names: Vec<String> =
            self.entries.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        let mut out = ParamSet::new();
        for n in names {
            let p = self.entries.remove(&n).expect("name listed above");
            out.entries.insert(n, p);
        }
        out
    }

    /// Zero tensors mirroring every entry.
    pub fn zeros_like(&self) -> TensorMap {
        self.entries.iter().map(|(k, p)| (k.clone(), Tensor::zeros(p.value.shape()))).collect()
    }

    /// Bitwise equality of names, flags and values.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb && a.prunable == b.prunable && a.value.bit_eq(&b.value)
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_split() {
        let mut ps = ParamSet::new();
        ps.insert("a.w", Tensor::zeros(&[2, 3]), true);
        ps.insert("a.b", Tensor::zeros(&[3]), false);
        ps.insert("head.w", Tensor::zeros(&[3, 2]), false);
        assert_eq!(ps.param_count(), 15);
        assert_eq!(ps.prunable_count(), 6);
        let head = ps.split_prefix("head.");
        assert_eq!(head.len(), 1);
        assert_eq!(ps.len(), 2);
        assert_eq!(ps.names().collect::<Vec<_>>(), vec!["a.b", "a.w"]);
    }
}
