//! AdamW with decoupled weight decay, its proximal variant, and the direct
//! ℓ1-subgradient baseline.
//!
//! One step with gradient `g` at step `k`:
//!
//! ```text
//! m ← β₁m + (1−β₁)g          m̂ = m / (1−β₁ᵏ)
//! v ← β₂v + (1−β₂)g²         v̂ = v / (1−β₂ᵏ)
//! η = schedule(k)
//! a = w − η(lr·m̂/(√v̂+ε) + λ·w)
//! ```
//!
//! `λ·w` is applied to prunable matrices only. The proximal variant then maps
//! prunable tensors through the weighted-ℓ1 prox with scalar step `η·lr`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamSet, TensorMap};
use crate::prox::{prox_in_place, ReweightState};

const MAX_STEP: u64 = 1 << 63;

/// Linear warmup followed by linear decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl ScheduleConfig {
    pub fn new(warmup_steps: u64, total_steps: u64) -> Result<Self> {
        let cfg = Self { warmup_steps, total_steps };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("schedule total_steps must be positive".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) exceeds total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Learning-rate multiplier at step `k`. Steps past `total_steps` get 0.
pub fn schedule_multiplier(k: u64, cfg: &ScheduleConfig) -> f64 {
    if k > cfg.total_steps {
        return 0.0;
    }
    if cfg.warmup_steps > 0 && k <= cfg.warmup_steps {
        return k as f64 / cfg.warmup_steps as f64;
    }
    if cfg.total_steps == cfg.warmup_steps {
        return 1.0;
    }
    (cfg.total_steps - k) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleConfig,
}

impl AdamWConfig {
    /// Defaults `lr = 1e-3`, `β = (0.9, 0.999)`, `ε = 1e-6`, no decay.
    pub fn with_schedule(schedule: ScheduleConfig) -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-6, weight_decay: 0.0, schedule }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("eps", self.eps)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("optimizer {name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("optimizer {name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        self.schedule.validate()
    }
}

/// What one step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub k: u64,
    pub multiplier: f64,
    /// `multiplier · lr`, the step size handed to the prox.
    pub prox_step: f64,
}

/// Moments and counters for one training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: TensorMap,
    pub v: TensorMap,
    pub k: u64,
    /// Steps taken past the end of the schedule.
    pub schedule_overruns: u64,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, m: params.zeros_like(), v: params.zeros_like(), k: 0, schedule_overruns: 0 })
    }

    fn check(&self, params: &ParamSet, grads: &TensorMap) -> Result<()> {
        if self.k >= MAX_STEP {
            return Err(Error::InvalidArgument("optimizer step counter overflow".into()));
        }
        for (name, p) in params.iter() {
            let g = grads.get(name).ok_or_else(|| Error::InvalidArgument(format!("missing gradient for `{name}`")))?;
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!("gradient {:?} vs parameter `{name}` {:?}", g.shape(), p.value.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
            if !self.m.contains_key(name) {
                return Err(Error::InvalidArgument(format!("optimizer has no state for `{name}`")));
            }
        }
        Ok(())
    }

    /// One AdamW step. Leaves the pre-prox point `a` in `params`.
    pub fn adamw_step(&mut self, params: &mut ParamSet, grads: &TensorMap) -> Result<StepInfo> {
        self.check(params, grads)?;
        self.k += 1;
        let k = self.k;
        let cfg = self.config;
        let multiplier = schedule_multiplier(k, &cfg.schedule);
        if k > cfg.schedule.total_steps {
            self.schedule_overruns += 1;
        }
        let bc1 = 1.0 - cfg.beta1.powf(k as f64);
        let bc2 = 1.0 - cfg.beta2.powf(k as f64);
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            let m = self.m.get_mut(name).expect("checked").data_mut();
            let v = self.v.get_mut(name).expect("checked").data_mut();
            let decay = if p.prunable { cfg.weight_decay } else { 0.0 };
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= multiplier * (cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps) + decay * *w);
            }
        }
        Ok(StepInfo { k, multiplier, prox_step: multiplier * cfg.lr })
    }

    /// AdamW step followed by the weighted-ℓ1 prox on prunable tensors.
    pub fn adamw_prox_step(&mut self, params: &mut ParamSet, grads: &TensorMap, rw: &ReweightState) -> Result<StepInfo> {
        for name in rw.alpha.keys() {
            if !params.get(name).is_some_and(|p| p.prunable) {
                return Err(Error::InvalidArgument(format!("reweighting factors for non-prunable `{name}`")));
            }
        }
        let info = self.adamw_step(params, grads)?;
        // A zero multiplier means a zero-length step: the prox is the identity.
        if rw.gamma == 0.0 || info.prox_step == 0.0 {
            return Ok(info);
        }
        for (name, alpha) in &rw.alpha {
            let w = params.tensor_mut(name)?;
            if w.shape() != alpha.shape() {
                return Err(Error::Shape(format!("factors {:?} vs `{name}` {:?}", alpha.shape(), w.shape())));
            }
            prox_in_place(w.data_mut(), info.prox_step, rw.gamma, alpha.data())?;
        }
        Ok(info)
    }

    /// AdamW step on `g + γ·α·sign(w)` for prunable tensors (subgradient 0 at
    /// `w = 0`). `alpha` may omit tensors, which then use factor 1.
    pub fn l1_subgradient_step(&mut self, params: &mut ParamSet, grads: &TensorMap, gamma: f64, alpha: &TensorMap) -> Result<StepInfo> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma must be non-negative, got {gamma}")));
        }
        if gamma == 0.0 {
            return self.adamw_step(params, grads);
        }
        let mut penalized = grads.clone();
        for (name, w) in params.prunable() {
            let g = penalized
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing gradient for `{name}`")))?;
            let factors = alpha.get(name);
            for (i, (gi, &wi)) in g.data_mut().iter_mut().zip(w.data()).enumerate() {
                let sign = if wi > 0.0 {
                    1.0
                } else if wi < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let a = factors.map_or(1.0, |f| f.data()[i]);
                *gi += gamma * a * sign;
            }
        }
        self.adamw_step(params, &penalized)
    }
}
