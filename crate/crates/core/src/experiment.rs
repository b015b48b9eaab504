//! Config-driven pipelines: pre-train, prune, fine-tune, analyse, with
//! checkpoints and CSV reports on disk.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::analysis::write_analysis;
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{gen_downstream_task, gen_pretrain_corpus, MaskedBatch, Task};
use crate::error::{Error, Result};
use crate::model::{build_head, build_model, evaluate_pretrain, ModelConfig};
use crate::params::ParamSet;
use crate::pattern::{extract_sparse_pattern, sparsity_ratio, SparsePattern, SparsityScope};
use crate::protocols::{
    finetune_with_mask, nip_run, penalty_baseline_run, pretrain_run, rpp_run, FinetuneOutcome, FinetuneSettings,
    OptimSettings, PretrainData, PruneSchedule, RppConfig, TaskSplit,
};
use crate::prox::ReweightState;
use crate::report::{loss_curves_csv, metrics_csv, read_csv, write_text, MetricRow, RowKind, RunReport, METRIC_COLUMNS};
use crate::rng::derive_seed;

/// Environment variable holding the root that relative output directories
/// resolve against.
pub const OUTPUT_ROOT_ENV: &str = "RPP_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Dense training only.
    #[default]
    Plain,
    Rpp,
    Nip,
    /// Direct ℓ1 subgradient training, plus a matching RPP run for the loss
    /// curve comparison.
    Penalty,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Plain => "plain",
            Protocol::Rpp => "rpp",
            Protocol::Nip => "nip",
            Protocol::Penalty => "penalty",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Segments in the pre-training corpus.
    pub corpus_size: usize,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub task_train: usize,
    pub task_eval: usize,
    pub eval_batches: usize,
    pub eval_batch_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus_size: 20_000,
            batch_size: 32,
            mask_prob: 0.15,
            task_train: 2000,
            task_eval: 1000,
            eval_batches: 4,
            eval_batch_size: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 600 }
    }
}

/// Everything one run needs. Every table and key is optional; missing
/// entries take their defaults and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Drives corpus, batches and task data. `model.seed` drives the
    /// initial weights.
    pub seed: u64,
    pub protocol: Protocol,
    /// Relative paths resolve against the output root.
    pub output_dir: PathBuf,
    pub tasks: Vec<Task>,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub optim: OptimSettings,
    pub pretrain: PretrainConfig,
    pub rpp: RppConfig,
    pub nip: PruneSchedule,
    pub finetune: FinetuneSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            protocol: Protocol::Plain,
            output_dir: PathBuf::from("run"),
            tasks: Task::ALL.to_vec(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            optim: OptimSettings::default(),
            pretrain: PretrainConfig::default(),
            rpp: RppConfig::default(),
            nip: PruneSchedule::default(),
            finetune: FinetuneSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `text`, applies `key=value` overrides (dotted keys, TOML
    /// values; bare words are taken as strings) and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            set_dotted(&mut table, item)?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.seq_len < 8 || !self.model.seq_len.is_multiple_of(2) {
            return Err(Error::Config(format!("model.seq_len must be even and at least 8, got {}", self.model.seq_len)));
        }
        let d = &self.data;
        for (name, v) in [
            ("corpus_size", d.corpus_size),
            ("batch_size", d.batch_size),
            ("task_train", d.task_train),
            ("task_eval", d.task_eval),
            ("eval_batches", d.eval_batches),
            ("eval_batch_size", d.eval_batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("data.{name} must be positive")));
            }
        }
        if !(d.mask_prob > 0.0 && d.mask_prob <= 1.0) {
            return Err(Error::Config(format!("data.mask_prob must lie in (0, 1], got {}", d.mask_prob)));
        }
        self.optim.adamw(self.pretrain.steps.max(1))?;
        self.rpp.validate()?;
        self.nip.validate()?;
        self.finetune.optim.adamw(self.finetune.steps.max(1))?;
        if !self.tasks.is_empty() && (self.finetune.steps == 0 || self.finetune.batch_size == 0) {
            return Err(Error::Config("finetune.steps and finetune.batch_size must be positive".into()));
        }
        let unique: BTreeSet<_> = self.tasks.iter().collect();
        if unique.len() != self.tasks.len() {
            return Err(Error::Config("tasks contains duplicates".into()));
        }
        Ok(())
    }

    /// Output directory with the root applied.
    pub fn resolve_output(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(r) if self.output_dir.is_relative() => r.join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

fn set_dotted(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not of the form key=value")))?;
    let key = key.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Result of a pruning phase.
#[derive(Debug, Clone)]
pub struct PruneResult {
    pub params: ParamSet,
    pub pattern: SparsePattern,
    pub reweight: Option<ReweightState>,
    pub report: RunReport,
    /// Step-aligned loss curves (penalty protocol only).
    pub loss_curves: Option<String>,
}

/// Fine-tuning results for every configured task.
#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub report: RunReport,
    pub outcomes: Vec<(Task, FinetuneOutcome)>,
}

/// Data and settings of one configured experiment.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub data: PretrainData,
    pub tasks: Vec<TaskSplit>,
    pub eval: Vec<MaskedBatch>,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let m = config.model;
        let corpus = gen_pretrain_corpus(derive_seed(seed, "corpus"), config.data.corpus_size, &m)?;
        let data = PretrainData {
            corpus,
            config: m,
            batch_size: config.data.batch_size,
            mask_prob: config.data.mask_prob,
            seed: derive_seed(seed, "batches"),
        };
        let eval = data.eval_batches(config.data.eval_batches, config.data.eval_batch_size)?;
        let tasks = config
            .tasks
            .iter()
            .map(|&t| {
                Ok(TaskSplit {
                    train: gen_downstream_task(t, derive_seed(seed, "task.train"), config.data.task_train, &m)?,
                    eval: gen_downstream_task(t, derive_seed(seed, "task.eval"), config.data.task_eval, &m)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, data, tasks, eval })
    }

    pub fn init_params(&self) -> Result<ParamSet> {
        Ok(build_model(self.config.model)?.params)
    }

    /// Steps consumed by the pruning phase of `protocol`.
    pub fn prune_steps(&self, protocol: Protocol) -> u64 {
        let c = &self.config;
        match protocol {
            Protocol::Plain => 0,
            Protocol::Rpp | Protocol::Penalty => u64::from(c.rpp.outer_iters) * c.rpp.inner_steps,
            Protocol::Nip => u64::from(c.nip.iterations) * c.nip.retrain_steps,
        }
    }

    pub fn pretrain(&self, params: &mut ParamSet) -> Result<RunReport> {
        pretrain_run(params, &self.data, self.config.pretrain.steps, &self.config.optim, 0)
    }

    /// Runs the pruning phase starting at the step after pre-training.
    pub fn prune(&self, params: ParamSet, protocol: Protocol) -> Result<PruneResult> {
        let c = &self.config;
        let start = c.pretrain.steps;
        match protocol {
            Protocol::Plain => {
                let pattern = extract_sparse_pattern(&params);
                Ok(PruneResult { params, pattern, reweight: None, report: RunReport::default(), loss_curves: None })
            }
            Protocol::Rpp => {
                let o = rpp_run(params, &self.data, &c.rpp, &c.optim, start)?;
                Ok(PruneResult { params: o.params, pattern: o.pattern, reweight: Some(o.reweight), report: o.report, loss_curves: None })
            }
            Protocol::Nip => {
                let no_tasks = FinetuneSettings::default();
                let mut iters = nip_run(params, &self.data, &c.nip, &c.optim, &[], &no_tasks, start)?;
                let mut report = RunReport::default();
                for it in &mut iters {
                    report.extend(std::mem::take(&mut it.report));
                }
                let last = iters.pop().expect("at least one iteration");
                Ok(PruneResult { params: last.params, pattern: last.pattern, reweight: None, report, loss_curves: None })
            }
            Protocol::Penalty => {
                let steps = self.prune_steps(Protocol::Penalty);
                let reference = RppConfig { trim_target: None, ..c.rpp };
                let rpp = rpp_run(params.clone(), &self.data, &reference, &c.optim, start)?;
                let (params, report) = penalty_baseline_run(params, &self.data, c.rpp.gamma, steps, &c.optim, start)?;
                let curves = loss_curves_csv(&[("penalty", report.train_losses()), ("rpp", rpp.report.train_losses())]);
                let pattern = extract_sparse_pattern(&params);
                Ok(PruneResult { params, pattern, reweight: None, report, loss_curves: Some(curves) })
            }
        }
    }

    /// Fine-tunes on every task with `pattern` held fixed, then checks that
    /// all task models share exactly that zero set.
    pub fn finetune(&self, params: &ParamSet, pattern: &SparsePattern, start_step: u64) -> Result<FinetuneResult> {
        let mut report = RunReport::default();
        let mut outcomes = Vec::new();
        for split in &self.tasks {
            let task = split.train.task;
            let settings = FinetuneSettings { seed: derive_seed(self.config.seed, "finetune"), ..self.config.finetune };
            let head = build_head(&self.config.model, task.classes(), derive_seed(self.config.model.seed, &format!("head.{}", task.name())));
            let o = finetune_with_mask(params, &self.config.model, pattern, head, split, &settings, start_step)?;
            report.extend(o.report.clone());
            outcomes.push((task, o));
        }
        check_universal(pattern, outcomes.iter().map(|(_, o)| &o.params))?;
        Ok(FinetuneResult { report, outcomes })
    }

    /// Held-out pre-training metrics as an eval row.
    pub fn eval_row(&self, params: &ParamSet, phase: &str, step: u64) -> Result<MetricRow> {
        let m = evaluate_pretrain(params, &self.config.model, &self.eval)?;
        let mut row = MetricRow::train(step, phase, m.loss);
        row.kind = RowKind::Eval;
        row.mlm_acc = Some(m.mlm_accuracy);
        row.nsp_acc = Some(m.nsp_accuracy);
        row.sparsity_prunable = sparsity_ratio(params, SparsityScope::Prunable).value();
        row.sparsity_all = sparsity_ratio(params, SparsityScope::All).value();
        Ok(row)
    }
}

/// Intersection and union of the task models' zero sets must both equal
/// `pattern`.
pub fn check_universal<'a>(pattern: &SparsePattern, models: impl Iterator<Item = &'a ParamSet>) -> Result<()> {
    for (i, params) in models.enumerate() {
        let mut zeros = extract_sparse_pattern(params);
        zeros.param_total = pattern.param_total;
        if zeros.zeros != pattern.zeros {
            return Err(Error::Invariant(format!("task model {i} zero set differs from the universal pattern")));
        }
    }
    Ok(())
}

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| Error::io(&path, e))?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Append-only sidecar log; the only output that carries timestamps.
pub struct RunLog {
    path: PathBuf,
}

impl RunLog {
    pub fn new(dir: &Path) -> Self {
        Self { path: dir.join("run.log") }
    }

    pub fn line(&self, msg: &str) {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(&self.path) {
            let _ = writeln!(f, "[{ts:.3}] {msg}");
        }
    }
}

/// Files written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub rows: Vec<MetricRow>,
    pub pattern: SparsePattern,
    pub task_accuracy: BTreeMap<Task, f64>,
}

/// Runs the configured pipeline into `cfg.resolve_output(root)`.
///
/// Writes `config.toml`, `pretrain.ckpt`, `pruned.ckpt`, `metrics.csv`,
/// `structure.csv`, `patterns/*.pgm` and, for the penalty protocol,
/// `loss_curves.csv`. On failure the rows gathered so far are still written,
/// along with `failure.txt`.
pub fn run_experiment(cfg: &ExperimentConfig, root: Option<&Path>) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.resolve_output(root);
    let _lock = OutputLock::acquire(&out)?;
    let log = RunLog::new(&out);
    log.line(&format!("start protocol={} seed={}", cfg.protocol.as_str(), cfg.seed));
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let mut rows = Vec::new();
    let result = run_phases(cfg, &out, &log, &mut rows);
    write_text(&out.join("metrics.csv"), &metrics_csv(&rows))?;
    match result {
        Ok((pattern, task_accuracy)) => {
            let _ = std::fs::remove_file(out.join("failure.txt"));
            log.line("done");
            Ok(RunSummary { output_dir: out, rows, pattern, task_accuracy })
        }
        Err(e) => {
            write_text(&out.join("failure.txt"), &format!("{e}\n"))?;
            log.line(&format!("failed: {e}"));
            Err(e)
        }
    }
}

fn run_phases(
    cfg: &ExperimentConfig,
    out: &Path,
    log: &RunLog,
    rows: &mut Vec<MetricRow>,
) -> Result<(SparsePattern, BTreeMap<Task, f64>)> {
    let pipe = Pipeline::new(cfg.clone())?;
    let mut params = pipe.init_params()?;

    log.line("pretrain");
    let report = pipe.pretrain(&mut params)?;
    rows.extend(report.rows);
    rows.push(pipe.eval_row(&params, "pretrain", cfg.pretrain.steps)?);
    save_checkpoint(&out.join("pretrain.ckpt"), &Checkpoint::new(cfg.model, params.clone()))?;

    log.line(&format!("prune ({})", cfg.protocol.as_str()));
    let pruned = pipe.prune(params, cfg.protocol)?;
    let end = cfg.pretrain.steps + pipe.prune_steps(cfg.protocol);
    let failed = pruned.report.failure.clone();
    rows.extend(pruned.report.rows);
    if let Some(curves) = &pruned.loss_curves {
        write_text(&out.join("loss_curves.csv"), curves)?;
    }
    if let Some(f) = failed {
        log.line(&format!("pruning phase stopped early: {f}"));
    }
    if !pruned.params.is_finite() {
        return Err(Error::Diverged { step: end, message: "pruned weights are not finite".into() });
    }
    rows.push(pipe.eval_row(&pruned.params, cfg.protocol.as_str(), end)?);
    let ck = Checkpoint { pattern: Some(pruned.pattern.clone()), reweight: pruned.reweight.clone(), ..Checkpoint::new(cfg.model, pruned.params.clone()) };
    save_checkpoint(&out.join("pruned.ckpt"), &ck)?;
    write_analysis(&pruned.params, &pruned.pattern, cfg.protocol.as_str(), &out.join("analysis"))?;

    log.line("finetune");
    let ft = pipe.finetune(&pruned.params, &pruned.pattern, end)?;
    rows.extend(ft.report.rows);
    let task_accuracy = ft.outcomes.iter().map(|(t, o)| (*t, o.eval_accuracy)).collect();
    Ok((pruned.pattern, task_accuracy))
}

/// Side-by-side table of eval metrics from several metrics CSVs, keyed by
/// prune-ratio bucket (width 0.05) and metric. Later rows for the same key
/// replace earlier ones. Deltas are against the first run.
pub fn compare_runs(paths: &[PathBuf]) -> Result<String> {
    if paths.len() < 2 {
        return Err(Error::InvalidArgument("compare needs at least two reports".into()));
    }
    let mut runs = Vec::new();
    for p in paths {
        let (header, records) = read_csv(p)?;
        let missing: Vec<&str> = METRIC_COLUMNS.iter().copied().filter(|c| !header.iter().any(|h| h == c)).collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("{}: missing columns: {}", p.display(), missing.join(", "))));
        }
        let col = |name: &str| header.iter().position(|h| h == name).expect("checked");
        let (kind, task, ratio) = (col("kind"), col("task"), col("sparsity_prunable"));
        let mut values: BTreeMap<(String, String), String> = BTreeMap::new();
        for r in records.iter().filter(|r| r[kind] == "eval") {
            let s: f64 = r[ratio].parse().map_err(|_| Error::Format { path: p.clone(), reason: format!("bad ratio `{}`", r[ratio]) })?;
            let bucket = format!("{:.2}", (s / 0.05).round() * 0.05);
            let metrics: Vec<(String, &str)> = if r[task].is_empty() {
                vec![("loss".into(), r[col("loss")].as_str()), ("mlm_acc".into(), &r[col("mlm_acc")]), ("nsp_acc".into(), &r[col("nsp_acc")])]
            } else {
                vec![(format!("task_acc:{}", r[task]), &r[col("task_acc")]), (format!("task_loss:{}", r[task]), &r[col("loss")])]
            };
            for (m, v) in metrics {
                if !v.is_empty() {
                    values.insert((bucket.clone(), m), v.to_string());
                }
            }
        }
        runs.push(values);
    }
    let keys: BTreeSet<&(String, String)> = runs.iter().flat_map(|r| r.keys()).collect();
    let label = |i: usize| format!("run{}", i + 1);
    let mut out = String::from("prune_bucket,metric");
    for i in 0..runs.len() {
        out.push_str(&format!(",{}", label(i)));
    }
    for i in 1..runs.len() {
        out.push_str(&format!(",delta_{}_{}", label(i), label(0)));
    }
    out.push('\n');
    for key in keys {
        out.push_str(&format!("{},{}", key.0, key.1));
        let vals: Vec<Option<&String>> = runs.iter().map(|r| r.get(key)).collect();
        for v in &vals {
            out.push(',');
            if let Some(v) = v {
                out.push_str(v);
            }
        }
        for v in &vals[1..] {
            out.push(',');
            if let (Some(a), Some(b)) = (v, vals[0]) {
                if let (Ok(a), Ok(b)) = (a.parse::<f64>(), b.parse::<f64>()) {
                    out.push_str(&(a - b).to_string());
                }
            }
        }
        out.push('\n');
    }
    Ok(out)
}
