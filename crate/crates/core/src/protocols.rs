//! Training protocols: dense pre-training, reweighted proximal pruning,
//! iterative magnitude pruning with masked retraining, the direct ℓ1-penalty
//! baseline, and fixed-mask fine-tuning.

use serde::{Deserialize, Serialize};

use crate::data::{pretrain_batch, Corpus, MaskedBatch, TaskData};
use crate::error::{Error, Result};
use crate::model::{downstream_grads, evaluate_task, pretrain_grads, ModelConfig};
use crate::optim::{AdamWConfig, OptimizerState, ScheduleConfig};
use crate::params::{ParamSet, TensorMap};
use crate::pattern::{
    apply_pattern, extract_sparse_pattern, hard_threshold_prune, mask_gradients, sparsity_ratio, PruneScope,
    SparsePattern, SparsityScope,
};
use crate::prox::{reweight_update, ExponentMode, ReweightState};
use crate::report::{MetricRow, RowKind, RunReport};
use crate::rng::derive_seed;

/// Optimizer hyperparameters shared by every phase; the schedule length is
/// the phase length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of each phase spent in linear warmup.
    pub warmup_frac: f64,
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self { lr: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-6, weight_decay: 0.01, warmup_frac: 0.1 }
    }
}

impl OptimSettings {
    pub fn adamw(&self, steps: u64) -> Result<AdamWConfig> {
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("warmup_frac must lie in [0, 1], got {}", self.warmup_frac)));
        }
        let warmup = (self.warmup_frac * steps as f64).round() as u64;
        let cfg = AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            schedule: ScheduleConfig { warmup_steps: warmup.min(steps), total_steps: steps },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Masked pre-training batches drawn deterministically per step index.
#[derive(Debug, Clone)]
pub struct PretrainData {
    pub corpus: Corpus,
    pub config: ModelConfig,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub seed: u64,
}

impl PretrainData {
    pub fn batch(&self, step: u64) -> Result<MaskedBatch> {
        pretrain_batch(&self.corpus, self.batch_size, self.mask_prob, derive_seed(self.seed, &format!("train.{step}")))
    }

    /// Held-out evaluation batches, independent of the training stream.
    pub fn eval_batches(&self, count: usize, size: usize) -> Result<Vec<MaskedBatch>> {
        (0..count)
            .map(|i| pretrain_batch(&self.corpus, size, self.mask_prob, derive_seed(self.seed, &format!("eval.{i}"))))
            .collect()
    }
}

/// How a pre-training step turns gradients into new weights.
#[derive(Debug, Clone, Copy)]
pub enum StepRule<'a> {
    AdamW,
    Prox(&'a ReweightState),
    Subgradient { gamma: f64, alpha: &'a TensorMap },
    /// AdamW with a frozen zero set.
    Masked(&'a SparsePattern),
}

fn sparsity_row(row: &mut MetricRow, params: &ParamSet) {
    row.sparsity_prunable = sparsity_ratio(params, SparsityScope::Prunable).value();
    row.sparsity_all = sparsity_ratio(params, SparsityScope::All).value();
}

/// Runs `steps` optimizer steps on the pre-training loss with a fresh
/// optimizer. Batches come from `data.batch(start_step + i)`.
///
/// A non-finite loss aborts with [`Error::Diverged`], except under
/// [`StepRule::Subgradient`], where it is recorded in the report and the run
/// stops early.
pub fn train_pretrain(
    params: &mut ParamSet,
    data: &PretrainData,
    steps: u64,
    optim: &OptimSettings,
    start_step: u64,
    phase: &str,
    rule: StepRule<'_>,
) -> Result<RunReport> {
    let mut report = RunReport::default();
    let mut state = OptimizerState::new(optim.adamw(steps)?, params)?;
    for i in 0..steps {
        let step = start_step + i;
        let batch = data.batch(step)?;
        let (metrics, mut grads) = match pretrain_grads(params, &data.config, &batch) {
            Ok(r) if r.0.loss.is_finite() => r,
            Ok(_) | Err(Error::NonFinite(_)) => {
                let message = format!("non-finite pre-training loss in phase `{phase}`");
                if matches!(rule, StepRule::Subgradient { .. }) {
                    report.failure = Some(format!("step {step}: {message}"));
                    let mut row = MetricRow::train(step, phase, f64::NAN);
                    sparsity_row(&mut row, params);
                    report.rows.push(row);
                    return Ok(report);
                }
                return Err(Error::Diverged { step, message });
            }
            Err(e) => return Err(e),
        };
        let mut row = MetricRow::train(step, phase, metrics.loss);
        row.mlm_acc = Some(metrics.mlm_accuracy);
        row.nsp_acc = Some(metrics.nsp_accuracy);
        sparsity_row(&mut row, params);
        report.rows.push(row);
        match rule {
            StepRule::AdamW => {
                state.adamw_step(params, &grads)?;
            }
            StepRule::Prox(rw) => {
                state.adamw_prox_step(params, &grads, rw)?;
            }
            StepRule::Subgradient { gamma, alpha } => {
                state.l1_subgradient_step(params, &grads, gamma, alpha)?;
            }
            StepRule::Masked(pattern) => {
                mask_gradients(&mut grads, pattern);
                state.adamw_step(params, &grads)?;
                apply_pattern(params, pattern)?;
            }
        }
        if !params.is_finite() {
            return Err(Error::Diverged { step, message: format!("non-finite weights in phase `{phase}`") });
        }
    }
    if state.schedule_overruns > 0 {
        report.notes.push(format!("{phase}: {} steps past schedule end", state.schedule_overruns));
    }
    Ok(report)
}

/// Dense AdamW pre-training.
pub fn pretrain_run(params: &mut ParamSet, data: &PretrainData, steps: u64, optim: &OptimSettings, start_step: u64) -> Result<RunReport> {
    train_pretrain(params, data, steps, optim, start_step, "pretrain", StepRule::AdamW)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RppConfig {
    pub gamma: f64,
    /// Outer reweighting iterations.
    pub outer_iters: u32,
    pub inner_steps: u64,
    pub eps: f64,
    pub exponent_mode: ExponentMode,
    /// Optional final hard-threshold top-up to exactly this prunable ratio.
    pub trim_target: Option<f64>,
}

impl Default for RppConfig {
    fn default() -> Self {
        Self { gamma: 1e-3, outer_iters: 3, inner_steps: 100, eps: 1e-9, exponent_mode: ExponentMode::Power, trim_target: None }
    }
}

impl RppConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("rpp.gamma must be non-negative, got {}", self.gamma)));
        }
        if self.outer_iters < 1 || self.inner_steps < 1 {
            return Err(Error::Config("rpp.outer_iters and rpp.inner_steps must be at least 1".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("rpp.eps must be positive, got {}", self.eps)));
        }
        if let Some(t) = self.trim_target {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("rpp.trim_target must lie in [0, 1], got {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RppOutcome {
    pub params: ParamSet,
    pub pattern: SparsePattern,
    pub reweight: ReweightState,
    pub report: RunReport,
    /// Prunable ratio before any trim.
    pub emergent_ratio: f64,
}

/// Reweighted proximal pruning: `outer_iters` rounds of proximal AdamW on
/// the pre-training loss, each followed by a factor update. The pattern is
/// read off the final weights; there is no retraining.
pub fn rpp_run(mut params: ParamSet, data: &PretrainData, cfg: &RppConfig, optim: &OptimSettings, start_step: u64) -> Result<RppOutcome> {
    cfg.validate()?;
    let mut rw = ReweightState::new(&params, cfg.gamma, cfg.eps, cfg.exponent_mode)?;
    let mut report = RunReport::default();
    let mut step = start_step;
    for t in 1..=cfg.outer_iters {
        rw.t = t;
        let phase = format!("rpp.t{t}");
        let part = train_pretrain(&mut params, data, cfg.inner_steps, optim, step, &phase, StepRule::Prox(&rw))?;
        report.extend(part);
        step += cfg.inner_steps;
        rw.alpha = reweight_update(&params, &rw)?;
        report.notes.push(format!(
            "{phase}: prunable sparsity {}",
            sparsity_ratio(&params, SparsityScope::Prunable)
        ));
    }
    let emergent = extract_sparse_pattern(&params);
    let emergent_ratio = emergent.ratio().value();
    let pattern = match cfg.trim_target {
        Some(target) if target > emergent_ratio => {
            let trim = hard_threshold_prune(&params, target, PruneScope::Global)?;
            apply_pattern(&mut params, &trim)?;
            report.trimmed = true;
            report.notes.push(format!("trimmed from {emergent_ratio:.4} to {target:.4} by hard threshold"));
            extract_sparse_pattern(&params)
        }
        _ => emergent,
    };
    Ok(RppOutcome { params, pattern, reweight: rw, report, emergent_ratio })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSchedule {
    /// Extra prune ratio per iteration.
    pub step_ratio: f64,
    pub iterations: u32,
    pub retrain_steps: u64,
    pub scope: PruneScope,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        Self { step_ratio: 0.1, iterations: 9, retrain_steps: 100, scope: PruneScope::Global }
    }
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_ratio > 0.0 && self.step_ratio <= 1.0) {
            return Err(Error::Config(format!("nip.step_ratio must lie in (0, 1], got {}", self.step_ratio)));
        }
        if self.iterations < 1 {
            return Err(Error::Config("nip.iterations must be at least 1".into()));
        }
        if f64::from(self.iterations) * self.step_ratio > 1.0 + 1e-9 {
            return Err(Error::Config(format!(
                "nip.iterations × nip.step_ratio = {} exceeds 1",
                f64::from(self.iterations) * self.step_ratio
            )));
        }
        Ok(())
    }

    pub fn ratio_at(&self, t: u32) -> f64 {
        (f64::from(t) * self.step_ratio).min(1.0)
    }
}

#[derive(Debug, Clone)]
pub struct NipIteration {
    pub t: u32,
    pub params: ParamSet,
    pub pattern: SparsePattern,
    pub report: RunReport,
}

/// Downstream fine-tuning settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSettings {
    pub steps: u64,
    pub batch_size: usize,
    pub optim: OptimSettings,
    pub seed: u64,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        Self { steps: 200, batch_size: 32, optim: OptimSettings { lr: 3e-3, ..OptimSettings::default() }, seed: 0 }
    }
}

/// Train/eval data for one downstream task.
#[derive(Debug, Clone)]
pub struct TaskSplit {
    pub train: TaskData,
    pub eval: TaskData,
}

/// Iterative magnitude pruning: at iteration `t` prune to `t·step_ratio`,
/// then retrain on the pre-training loss with the zero set frozen. When
/// `tasks` is non-empty, every iteration's model is also fine-tuned on each
/// task and the eval accuracies are added to that iteration's report.
pub fn nip_run(
    mut params: ParamSet,
    data: &PretrainData,
    schedule: &PruneSchedule,
    optim: &OptimSettings,
    tasks: &[TaskSplit],
    finetune: &FinetuneSettings,
    start_step: u64,
) -> Result<Vec<NipIteration>> {
    schedule.validate()?;
    let mut out = Vec::with_capacity(schedule.iterations as usize);
    let mut step = start_step;
    let mut previous: Option<SparsePattern> = None;
    for t in 1..=schedule.iterations {
        let pattern = hard_threshold_prune(&params, schedule.ratio_at(t), schedule.scope)?;
        apply_pattern(&mut params, &pattern)?;
        if let Some(prev) = &previous {
            if !prev.is_subset_of(&pattern) {
                return Err(Error::Invariant(format!("iteration {t} pattern does not contain iteration {}", t - 1)));
            }
        }
        let phase = format!("nip.t{t}");
        let mut report =
            train_pretrain(&mut params, data, schedule.retrain_steps, optim, step, &phase, StepRule::Masked(&pattern))?;
        step += schedule.retrain_steps;
        let held = extract_sparse_pattern(&params);
        if !pattern.is_subset_of(&held) {
            return Err(Error::Invariant(format!("retraining at iteration {t} revived pruned weights")));
        }
        for (i, split) in tasks.iter().enumerate() {
            let head = crate::model::build_head(&data.config, split.train.task.classes(), derive_seed(finetune.seed, &format!("nip.{t}.{i}")));
            let ft = finetune_with_mask(&params, &data.config, &pattern, head, split, finetune, step)?;
            report.rows.extend(ft.report.rows.into_iter().filter(|r| r.kind == RowKind::Eval));
        }
        report.notes.push(format!("{phase}: pattern {}", pattern.ratio()));
        previous = Some(pattern.clone());
        out.push(NipIteration { t, params: params.clone(), pattern, report });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: ParamSet,
    pub head: ParamSet,
    pub report: RunReport,
    pub eval_accuracy: f64,
}

/// Fine-tunes model and head on one task while every pattern position stays
/// exactly zero.
pub fn finetune_with_mask(
    params: &ParamSet,
    cfg: &ModelConfig,
    pattern: &SparsePattern,
    head: ParamSet,
    task: &TaskSplit,
    settings: &FinetuneSettings,
    start_step: u64,
) -> Result<FinetuneOutcome> {
    if settings.steps < 1 || settings.batch_size < 1 {
        return Err(Error::Config("finetune.steps and finetune.batch_size must be at least 1".into()));
    }
    if head.names().any(|n| !n.starts_with("head.")) {
        return Err(Error::InvalidArgument("head parameters must be named `head.*`".into()));
    }
    pattern.validate()?;
    let name = task.train.task.name();
    let mut merged = params.clone();
    apply_pattern(&mut merged, pattern)?;
    merged.extend(head);
    let mut state = OptimizerState::new(settings.optim.adamw(settings.steps)?, &merged)?;
    let mut report = RunReport::default();
    let phase = format!("finetune.{name}");
    let data_seed = derive_seed(settings.seed, &phase);
    for i in 0..settings.steps {
        let step = start_step + i;
        let idx = crate::data::batch_indices(task.train.len(), settings.batch_size, i, data_seed);
        let batch = task.train.batch(&idx);
        let (m, grads) = downstream_grads(&merged, cfg, &batch, true)?;
        if !m.loss.is_finite() {
            return Err(Error::Diverged { step, message: format!("non-finite loss fine-tuning `{name}`") });
        }
        let mut grads = grads.expect("requested");
        let mut row = MetricRow::train(step, &phase, m.loss);
        row.task = Some(name.to_string());
        row.task_acc = Some(m.accuracy);
        sparsity_row(&mut row, &merged);
        report.rows.push(row);
        mask_gradients(&mut grads, pattern);
        state.adamw_step(&mut merged, &grads)?;
        apply_pattern(&mut merged, pattern)?;
    }
    let held = extract_sparse_pattern(&merged);
    if !pattern.is_subset_of(&held) {
        return Err(Error::Invariant(format!("fine-tuning `{name}` changed the sparse pattern")));
    }
    let eval = evaluate_task(&merged, cfg, &task.eval.all(), 256)?;
    let mut row = MetricRow::train(start_step + settings.steps, &phase, eval.loss);
    row.kind = RowKind::Eval;
    row.task = Some(name.to_string());
    row.task_acc = Some(eval.accuracy);
    sparsity_row(&mut row, &merged);
    report.rows.push(row);
    let head = merged.split_prefix("head.");
    Ok(FinetuneOutcome { params: merged, head, report, eval_accuracy: eval.accuracy })
}

/// Direct ℓ1-penalty baseline: AdamW on `g + γ·sign(w)` with no prox.
pub fn penalty_baseline_run(mut params: ParamSet, data: &PretrainData, gamma: f64, steps: u64, optim: &OptimSettings, start_step: u64) -> Result<(ParamSet, RunReport)> {
    let alpha = TensorMap::new();
    let report = train_pretrain(&mut params, data, steps, optim, start_step, "penalty", StepRule::Subgradient { gamma, alpha: &alpha })?;
    Ok((params, report))
}
