//! Sparse patterns: which prunable weights are exactly zero.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

/// An exact ratio `zeros / total` with its float value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub zeros: usize,
    pub total: usize,
}

impl Ratio {
    pub fn value(self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.zeros as f64 / self.total as f64
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{} ({:.4})", self.zeros, self.total, self.value())
    }
}

/// Zero positions per prunable tensor.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SparsePattern {
    /// Sorted, duplicate-free flat indices per prunable tensor. Every
    /// prunable tensor has an entry, possibly empty.
    pub zeros: BTreeMap<String, Vec<usize>>,
    /// Element count of each prunable tensor.
    pub sizes: BTreeMap<String, usize>,
    /// Element count of the whole parameter set.
    pub param_total: usize,
}

impl SparsePattern {
    pub fn pruned(&self) -> usize {
        self.zeros.values().map(Vec::len).sum()
    }

    pub fn prunable_total(&self) -> usize {
        self.sizes.values().sum()
    }

    /// Pruned fraction of the prunable set.
    pub fn ratio(&self) -> Ratio {
        Ratio { zeros: self.pruned(), total: self.prunable_total() }
    }

    /// Pruned fraction of all parameters.
    pub fn ratio_all(&self) -> Ratio {
        Ratio { zeros: self.pruned(), total: self.param_total }
    }

    pub fn is_empty(&self) -> bool {
        self.pruned() == 0
    }

    /// Whether every index of `self` is also in `other`.
    pub fn is_subset_of(&self, other: &SparsePattern) -> bool {
        self.zeros.iter().all(|(name, idx)| {
            let Some(o) = other.zeros.get(name) else { return idx.is_empty() };
            idx.iter().all(|i| o.binary_search(i).is_ok())
        })
    }

    /// Checks sortedness, uniqueness and index bounds.
    pub fn validate(&self) -> Result<()> {
        for (name, idx) in &self.zeros {
            let size = *self
                .sizes
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("pattern tensor `{name}` has no size")))?;
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!("pattern indices for `{name}` not sorted/unique")));
            }
            if idx.last().is_some_and(|&i| i >= size) {
                return Err(Error::InvalidArgument(format!("pattern index out of range for `{name}` ({size} weights)")));
            }
        }
        Ok(())
    }
}

/// Positions of bit-exact zeros among the prunable tensors.
pub fn extract_sparse_pattern(params: &ParamSet) -> SparsePattern {
    let mut pattern = SparsePattern { param_total: params.param_count(), ..Default::default() };
    for (name, t) in params.prunable() {
        let idx = t.data().iter().enumerate().filter(|(_, &v)| v == 0.0).map(|(i, _)| i).collect();
        pattern.zeros.insert(name.to_string(), idx);
        pattern.sizes.insert(name.to_string(), t.len());
    }
    pattern
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneScope {
    /// One magnitude threshold across all prunable tensors.
    #[default]
    Global,
    /// The same ratio inside each tensor.
    PerTensor,
}

/// `⌊p·n⌋`, robust to `p·n` landing a rounding error below an integer.
pub fn target_count(p: f64, n: usize) -> usize {
    let x = p * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * (n as f64).max(1.0) {
        r as usize
    } else {
        x.floor() as usize
    }
}

/// Selects the `⌊p·n⌋` smallest-magnitude prunable weights. Ties are broken
/// by tensor name, then flat index. Does not modify `params`.
pub fn hard_threshold_prune(params: &ParamSet, p: f64, scope: PruneScope) -> Result<SparsePattern> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("prune ratio must lie in [0, 1], got {p}")));
    }
    let mut pattern = SparsePattern { param_total: params.param_count(), ..Default::default() };
    for (name, t) in params.prunable() {
        pattern.zeros.insert(name.to_string(), Vec::new());
        pattern.sizes.insert(name.to_string(), t.len());
    }
    match scope {
        PruneScope::Global => {
            // (magnitude, tensor rank in name order, flat index)
            let names: Vec<&str> = params.prunable().map(|(n, _)| n).collect();
            let mut all: Vec<(f64, usize, usize)> = Vec::with_capacity(params.prunable_count());
            for (ti, (_, t)) in params.prunable().enumerate() {
                all.extend(t.data().iter().enumerate().map(|(i, v)| (v.abs(), ti, i)));
            }
            let k = target_count(p, all.len());
            if k < all.len() {
                all.select_nth_unstable_by(k, cmp_entry);
            }
            for &(_, ti, i) in &all[..k] {
                pattern.zeros.get_mut(names[ti]).expect("listed").push(i);
            }
        }
        PruneScope::PerTensor => {
            for (name, t) in params.prunable() {
                let mut entries: Vec<(f64, usize, usize)> =
                    t.data().iter().enumerate().map(|(i, v)| (v.abs(), 0, i)).collect();
                let k = target_count(p, entries.len());
                if k < entries.len() {
                    entries.select_nth_unstable_by(k, cmp_entry);
                }
                pattern.zeros.get_mut(name).expect("listed").extend(entries[..k].iter().map(|e| e.2));
            }
        }
    }
    for idx in pattern.zeros.values_mut() {
        idx.sort_unstable();
    }
    Ok(pattern)
}

fn cmp_entry(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

/// Writes exact zeros at every pattern position.
pub fn apply_pattern(params: &mut ParamSet, pattern: &SparsePattern) -> Result<()> {
    for (name, idx) in &pattern.zeros {
        let t = params.tensor_mut(name)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.len()) {
            return Err(Error::InvalidArgument(format!("pattern index {bad} out of range for `{name}` ({} weights)", t.len())));
        }
        let data = t.data_mut();
        for &i in idx {
            data[i] = 0.0;
        }
    }
    Ok(())
}

/// Zeroes gradient entries at pattern positions.
pub fn mask_gradients(grads: &mut crate::params::TensorMap, pattern: &SparsePattern) {
    for (name, idx) in &pattern.zeros {
        if let Some(g) = grads.get_mut(name) {
            let data = g.data_mut();
            for &i in idx {
                data[i] = 0.0;
            }
        }
    }
}

/// Which parameters a sparsity ratio counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparsityScope {
    Prunable,
    /// Zeros among prunable tensors over the size of the whole set.
    All,
}

/// Exact-zero fraction within `scope`. Non-prunable tensors are never
/// pruned, so zeros they happen to hold (e.g. zero-initialised biases) are
/// not counted.
pub fn sparsity_ratio(params: &ParamSet, scope: SparsityScope) -> Ratio {
    let zeros = params.prunable().map(|(_, t)| t.count_zeros()).sum();
    let total = match scope {
        SparsityScope::Prunable => params.prunable_count(),
        SparsityScope::All => params.param_count(),
    };
    Ratio { zeros, total }
}
