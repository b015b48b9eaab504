//! Weighted-ℓ1 proximal operator and reweighting factors.
//!
//! For a pre-prox point `a`, step `λ`, strength `γ` and positive factors `α`,
//! the minimiser of `γ Σ αᵢ|wᵢ| + ‖w − a‖² / 2λ` is, per coordinate,
//!
//! ```text
//! wᵢ = (1 − γλαᵢ/|aᵢ|) aᵢ   if |aᵢ| > λγαᵢ
//! wᵢ = 0                     otherwise
//! ```
//!
//! The zero branch writes a literal `0.0`, so pruned coordinates are exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamSet, TensorMap};
use crate::tensor::Tensor;

/// Scalar weighted soft-threshold. Caller guarantees valid arguments.
#[inline]
pub fn prox_scalar(a: f64, step: f64, gamma: f64, alpha: f64) -> f64 {
    if gamma == 0.0 {
        return a;
    }
    let threshold = step * gamma * alpha;
    if a.abs() > threshold {
        (1.0 - gamma * step * alpha / a.abs()) * a
    } else {
        0.0
    }
}

fn check_args(step: f64, gamma: f64) -> Result<()> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("prox step must be positive and finite, got {step}")));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("gamma must be non-negative and finite, got {gamma}")));
    }
    Ok(())
}

/// In-place weighted soft-threshold over a slice.
pub fn prox_in_place(values: &mut [f64], step: f64, gamma: f64, alpha: &[f64]) -> Result<()> {
    check_args(step, gamma)?;
    if values.len() != alpha.len() {
        return Err(Error::Shape(format!("prox: {} values vs {} factors", values.len(), alpha.len())));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("prox input is not finite ({bad})")));
    }
    if let Some(bad) = alpha.iter().find(|&&f| f.is_nan() || f <= 0.0) {
        return Err(Error::InvalidArgument(format!("reweighting factor must be positive, got {bad}")));
    }
    for (v, &f) in values.iter_mut().zip(alpha) {
        *v = prox_scalar(*v, step, gamma, f);
    }
    Ok(())
}

/// Weighted-ℓ1 proximal operator on a tensor.
pub fn prox_rw_l1(a: &Tensor, step: f64, gamma: f64, alpha: &Tensor) -> Result<Tensor> {
    if a.shape() != alpha.shape() {
        return Err(Error::Shape(format!("prox: input {:?} vs factors {:?}", a.shape(), alpha.shape())));
    }
    let mut out = a.clone();
    prox_in_place(out.data_mut(), step, gamma, alpha.data())?;
    Ok(out)
}

/// Objective minimised by the proximal operator, for one coordinate.
pub fn prox_objective(w: f64, a: f64, step: f64, gamma: f64, alpha: f64) -> f64 {
    gamma * alpha * w.abs() + (w - a) * (w - a) / (2.0 * step)
}

/// How the reweighting factors depend on the outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExponentMode {
    /// `αᵢ = 1 / (|wᵢ| + ε)`.
    Candes,
    /// `αᵢ = 1 / (|wᵢ|ᵗ + ε)` at outer iteration `t`.
    #[default]
    Power,
}

impl ExponentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ExponentMode::Candes => "candes",
            ExponentMode::Power => "power",
        }
    }
}

/// Factor for one weight at outer iteration `t`.
#[inline]
pub fn reweight_factor(w: f64, t: u32, eps: f64, mode: ExponentMode) -> f64 {
    let magnitude = match mode {
        ExponentMode::Candes => w.abs(),
        ExponentMode::Power => w.abs().powi(t as i32),
    };
    1.0 / (magnitude + eps)
}

/// Per-weight penalty factors for the prunable tensors plus the constants
/// of the reweighting loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ReweightState {
    pub alpha: TensorMap,
    /// Current outer iteration, starting at 1.
    pub t: u32,
    pub gamma: f64,
    pub eps: f64,
    pub mode: ExponentMode,
}

impl ReweightState {
    /// All factors start at one.
    pub fn new(params: &ParamSet, gamma: f64, eps: f64, mode: ExponentMode) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma must be non-negative, got {gamma}")));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("reweighting epsilon must be non-negative, got {eps}")));
        }
        let alpha = params.prunable().map(|(n, t)| (n.to_string(), Tensor::filled(t.shape(), 1.0))).collect();
        Ok(Self { alpha, t: 1, gamma, eps, mode })
    }
}

/// New factors from the current weights, using exponent `rw.t`.
pub fn reweight_update(params: &ParamSet, rw: &ReweightState) -> Result<TensorMap> {
    if rw.t < 1 {
        return Err(Error::InvalidArgument("outer iteration must be at least 1".into()));
    }
    let mut out = TensorMap::new();
    for name in rw.alpha.keys() {
        let w = params.tensor(name)?;
        out.insert(name.clone(), w.map(|v| reweight_factor(v, rw.t, rw.eps, rw.mode)));
    }
    Ok(out)
}
