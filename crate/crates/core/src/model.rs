//! Desk-scale BERT-style encoder.
//!
//! Post-layer-norm transformer blocks over learned token and position
//! embeddings, a tanh pooler on the first token, a masked-token head and a
//! sentence-pair head. Only the per-layer attention and feed-forward matrices
//! are prunable.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::data::{LabeledBatch, MaskedBatch};
use crate::error::{Error, Result};
use crate::params::{ParamSet, TensorMap};
use crate::rng::rng_for;
use crate::tensor::{argmax, Tensor};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub ffn: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { layers: 2, hidden: 64, heads: 4, vocab: 64, seq_len: 16, ffn: 256, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields =
            [("layers", self.layers), ("hidden", self.hidden), ("heads", self.heads), ("vocab", self.vocab), ("seq_len", self.seq_len), ("ffn", self.ffn)];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.hidden ({}) must be divisible by model.heads ({})",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    /// Per-head width `d_k`.
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Names of the matrices pruning may touch, in layer order.
    pub fn prunable_names(&self) -> Vec<String> {
        (0..self.layers)
            .flat_map(|l| {
                ["attn.query.w", "attn.key.w", "attn.value.w", "attn.output.w", "ffn.in.w", "ffn.out.w"]
                    .map(|s| format!("layer{l}.{s}"))
            })
            .collect()
    }
}

/// Configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

fn trunc_normal(rng: &mut crate::rng::Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * INIT_STD;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Builds a freshly initialised model.
pub fn build_model(config: ModelConfig) -> Result<Model> {
    config.validate()?;
    let (h, v, s, f) = (config.hidden, config.vocab, config.seq_len, config.ffn);
    let mut rng = rng_for(config.seed, "model.init");
    let mut p = ParamSet::new();
    let ln = |p: &mut ParamSet, prefix: &str| {
        p.insert(format!("{prefix}.gamma"), Tensor::filled(&[h], 1.0), false);
        p.insert(format!("{prefix}.beta"), Tensor::zeros(&[h]), false);
    };
    p.insert("embed.token", trunc_normal(&mut rng, &[v, h]), false);
    p.insert("embed.position", trunc_normal(&mut rng, &[s, h]), false);
    ln(&mut p, "embed.ln");
    for l in 0..config.layers {
        for proj in ["query", "key", "value", "output"] {
            p.insert(format!("layer{l}.attn.{proj}.w"), trunc_normal(&mut rng, &[h, h]), true);
            p.insert(format!("layer{l}.attn.{proj}.b"), Tensor::zeros(&[h]), false);
        }
        ln(&mut p, &format!("layer{l}.attn.ln"));
        p.insert(format!("layer{l}.ffn.in.w"), trunc_normal(&mut rng, &[h, f]), true);
        p.insert(format!("layer{l}.ffn.in.b"), Tensor::zeros(&[f]), false);
        p.insert(format!("layer{l}.ffn.out.w"), trunc_normal(&mut rng, &[f, h]), true);
        p.insert(format!("layer{l}.ffn.out.b"), Tensor::zeros(&[h]), false);
        ln(&mut p, &format!("layer{l}.ffn.ln"));
    }
    p.insert("pooler.w", trunc_normal(&mut rng, &[h, h]), false);
    p.insert("pooler.b", Tensor::zeros(&[h]), false);
    p.insert("mlm.w", trunc_normal(&mut rng, &[h, v]), false);
    p.insert("mlm.b", Tensor::zeros(&[v]), false);
    p.insert("nsp.w", trunc_normal(&mut rng, &[h, 2]), false);
    p.insert("nsp.b", Tensor::zeros(&[2]), false);
    Ok(Model { config, params: p })
}

/// A fresh classification head for `classes` labels, named `head.*`.
pub fn build_head(config: &ModelConfig, classes: usize, seed: u64) -> ParamSet {
    let mut rng = rng_for(seed, "head.init");
    let mut p = ParamSet::new();
    p.insert("head.w", trunc_normal(&mut rng, &[config.hidden, classes]), false);
    p.insert("head.b", Tensor::zeros(&[classes]), false);
    p
}

/// `softmax(Q Kᵀ / √d_k) V` on graph nodes of shape `[.., seq, d]`.
pub fn attention_node(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId, d_k: usize) -> NodeId {
    let scores = g.matmul_nt(q, k);
    let scaled = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let probs = g.softmax(scaled);
    g.matmul(probs, v)
}

/// Scaled dot-product attention on plain matrices: `q` is `[n, d]`, `k` is
/// `[m, d]`, `v` is `[m, d_v]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, d_k: usize) -> Result<Tensor> {
    if d_k == 0 {
        return Err(Error::InvalidArgument("d_k must be positive".into()));
    }
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || k.shape()[0] != v.shape()[0] {
        return Err(Error::Shape(format!(
            "attention: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut g = Graph::new();
    let (qn, kn, vn) = (g.input("q"), g.input("k"), g.input("v"));
    let out = attention_node(&mut g, qn, kn, vn, d_k);
    let inputs = BTreeMap::from([("q".to_string(), q.clone()), ("k".to_string(), k.clone()), ("v".to_string(), v.clone())]);
    Ok(g.evaluate(&ParamSet::new(), &inputs)?.value(out).clone())
}

fn linear(g: &mut Graph, x: NodeId, prefix: &str) -> NodeId {
    let w = g.param(&format!("{prefix}.w"));
    let b = g.param(&format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add_bias(y, b)
}

fn layer_norm(g: &mut Graph, x: NodeId, prefix: &str) -> NodeId {
    let gamma = g.param(&format!("{prefix}.gamma"));
    let beta = g.param(&format!("{prefix}.beta"));
    g.layer_norm(x, gamma, beta, LN_EPS)
}

struct Encoded {
    /// Final hidden states, `[batch * seq, hidden]`.
    hidden: NodeId,
    /// Pooled first-token representation, `[batch, hidden]`.
    pooled: NodeId,
}

/// Encoder graph over input `tokens` (`[batch, seq]` ids).
fn encoder(g: &mut Graph, cfg: &ModelConfig, batch: usize) -> Encoded {
    let (s, h, a, dk) = (cfg.seq_len, cfg.hidden, cfg.heads, cfg.head_dim());
    let tokens = g.input("tokens");
    let tok_table = g.param("embed.token");
    let pos_table = g.param("embed.position");
    let pos_ids = g.constant(
        Tensor::new(vec![batch, s], (0..batch).flat_map(|_| (0..s).map(|p| p as f64)).collect())
            .expect("position ids"),
    );
    let tok = g.gather(tok_table, tokens);
    let pos = g.gather(pos_table, pos_ids);
    let sum = g.add(tok, pos);
    let flat = g.reshape(sum, &[batch * s, h]);
    let mut x = layer_norm(g, flat, "embed.ln");

    for l in 0..cfg.layers {
        let heads = |g: &mut Graph, x: NodeId, name: &str| {
            let y = linear(g, x, &format!("layer{l}.attn.{name}"));
            let y = g.reshape(y, &[batch, s, a, dk]);
            g.permute(y, &[0, 2, 1, 3])
        };
        let q = heads(g, x, "query");
        let k = heads(g, x, "key");
        let v = heads(g, x, "value");
        let ctx = attention_node(g, q, k, v, dk);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[batch * s, h]);
        let attn = linear(g, ctx, &format!("layer{l}.attn.output"));
        let res = g.add(x, attn);
        x = layer_norm(g, res, &format!("layer{l}.attn.ln"));

        let inner = linear(g, x, &format!("layer{l}.ffn.in"));
        let inner = g.gelu(inner);
        let out = linear(g, inner, &format!("layer{l}.ffn.out"));
        let res = g.add(x, out);
        x = layer_norm(g, res, &format!("layer{l}.ffn.ln"));
        g.name(x, format!("layer{l}.output"));
    }

    let cls_rows = g.constant(Tensor::vector((0..batch).map(|b| (b * s) as f64).collect()));
    let cls = g.gather(x, cls_rows);
    let pooled = linear(g, cls, "pooler");
    let pooled = g.tanh(pooled);
    Encoded { hidden: x, pooled }
}

/// Pre-training graph: masked-token cross-entropy plus sentence-pair
/// cross-entropy.
pub struct PretrainGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub mlm_logits: NodeId,
    pub nsp_logits: NodeId,
}

impl PretrainGraph {
    pub fn new(cfg: &ModelConfig, batch: usize) -> Self {
        let mut g = Graph::new();
        let enc = encoder(&mut g, cfg, batch);
        let rows = g.input("mlm_rows");
        let masked = g.gather(enc.hidden, rows);
        let mlm_logits = linear(&mut g, masked, "mlm");
        let mlm_targets = g.input("mlm_targets");
        let mlm_loss = g.cross_entropy(mlm_logits, mlm_targets, None);
        g.name(mlm_loss, "mlm_loss");
        let nsp_logits = linear(&mut g, enc.pooled, "nsp");
        let nsp_labels = g.input("nsp_labels");
        let nsp_loss = g.cross_entropy(nsp_logits, nsp_labels, None);
        g.name(nsp_loss, "nsp_loss");
        let loss = g.add(mlm_loss, nsp_loss);
        g.name(loss, "loss");
        Self { graph: g, loss, mlm_logits, nsp_logits }
    }
}

fn token_tensor(tokens: &[Vec<u32>], cfg: &ModelConfig) -> Result<Tensor> {
    let mut data = Vec::with_capacity(tokens.len() * cfg.seq_len);
    for seq in tokens {
        if seq.len() != cfg.seq_len {
            return Err(Error::InvalidArgument(format!("sequence length {} != seq_len {}", seq.len(), cfg.seq_len)));
        }
        for &t in seq {
            if t as usize >= cfg.vocab {
                return Err(Error::InvalidArgument(format!("token id {t} outside vocab {}", cfg.vocab)));
            }
            data.push(f64::from(t));
        }
    }
    Tensor::new(vec![tokens.len(), cfg.seq_len], data)
}

fn pretrain_inputs(batch: &MaskedBatch, cfg: &ModelConfig) -> Result<BTreeMap<String, Tensor>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if batch.masked_count() == 0 {
        return Err(Error::InvalidArgument("batch has no masked positions".into()));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, (pos, orig)) in batch.positions.iter().zip(&batch.originals).enumerate() {
        for (&p, &t) in pos.iter().zip(orig) {
            if p >= cfg.seq_len {
                return Err(Error::InvalidArgument(format!("mask position {p} outside seq_len {}", cfg.seq_len)));
            }
            rows.push((b * cfg.seq_len + p) as f64);
            targets.push(f64::from(t));
        }
    }
    let nsp = batch.is_next.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
    Ok(BTreeMap::from([
        ("tokens".to_string(), token_tensor(&batch.tokens, cfg)?),
        ("mlm_rows".to_string(), Tensor::vector(rows)),
        ("mlm_targets".to_string(), Tensor::vector(targets)),
        ("nsp_labels".to_string(), Tensor::vector(nsp)),
    ]))
}

/// Loss and accuracies on one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainMetrics {
    pub loss: f64,
    pub mlm_accuracy: f64,
    pub nsp_accuracy: f64,
}

fn accuracy(logits: &Tensor, targets: &Tensor) -> f64 {
    let c = logits.last_dim();
    let hits = logits
        .data()
        .chunks(c)
        .zip(targets.data())
        .filter(|(row, &t)| argmax(row) == t as usize)
        .count();
    hits as f64 / targets.len() as f64
}

fn run_pretrain(params: &ParamSet, cfg: &ModelConfig, batch: &MaskedBatch, with_grads: bool) -> Result<(PretrainMetrics, Option<TensorMap>)> {
    let inputs = pretrain_inputs(batch, cfg)?;
    let pg = PretrainGraph::new(cfg, batch.len());
    let eval = pg.graph.evaluate(params, &inputs)?;
    let metrics = PretrainMetrics {
        loss: eval.scalar(pg.loss).expect("scalar loss"),
        mlm_accuracy: accuracy(eval.value(pg.mlm_logits), &inputs["mlm_targets"]),
        nsp_accuracy: accuracy(eval.value(pg.nsp_logits), &inputs["nsp_labels"]),
    };
    let grads = if with_grads { Some(pg.graph.backprop(params, &eval, pg.loss)?) } else { None };
    Ok((metrics, grads))
}

/// Pre-training loss and accuracies.
pub fn forward_pretrain(params: &ParamSet, cfg: &ModelConfig, batch: &MaskedBatch) -> Result<PretrainMetrics> {
    Ok(run_pretrain(params, cfg, batch, false)?.0)
}

/// Pre-training loss, accuracies and gradients for every parameter.
pub fn pretrain_grads(params: &ParamSet, cfg: &ModelConfig, batch: &MaskedBatch) -> Result<(PretrainMetrics, TensorMap)> {
    let (m, g) = run_pretrain(params, cfg, batch, true)?;
    Ok((m, g.expect("requested")))
}

/// Classification graph reading `head.w` / `head.b`.
pub struct DownstreamGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub logits: NodeId,
}

impl DownstreamGraph {
    pub fn new(cfg: &ModelConfig, batch: usize) -> Self {
        let mut g = Graph::new();
        let enc = encoder(&mut g, cfg, batch);
        let logits = linear(&mut g, enc.pooled, "head");
        let labels = g.input("labels");
        let loss = g.cross_entropy(logits, labels, None);
        g.name(loss, "task_loss");
        Self { graph: g, loss, logits }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

fn downstream_inputs(batch: &LabeledBatch, cfg: &ModelConfig, classes: usize) -> Result<BTreeMap<String, Tensor>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside {classes} classes")));
    }
    Ok(BTreeMap::from([
        ("tokens".to_string(), token_tensor(&batch.tokens, cfg)?),
        ("labels".to_string(), Tensor::vector(batch.labels.iter().map(|&l| l as f64).collect())),
    ]))
}

fn head_classes(params: &ParamSet) -> Result<usize> {
    let b = params.tensor("head.b")?;
    Ok(b.len())
}

/// Task loss/accuracy and gradients. `params` must include the `head.*`
/// entries.
pub fn downstream_grads(params: &ParamSet, cfg: &ModelConfig, batch: &LabeledBatch, with_grads: bool) -> Result<(TaskMetrics, Option<TensorMap>)> {
    let inputs = downstream_inputs(batch, cfg, head_classes(params)?)?;
    let dg = DownstreamGraph::new(cfg, batch.len());
    let eval = dg.graph.evaluate(params, &inputs)?;
    let metrics = TaskMetrics {
        loss: eval.scalar(dg.loss).expect("scalar loss"),
        accuracy: accuracy(eval.value(dg.logits), &inputs["labels"]),
    };
    let grads = if with_grads { Some(dg.graph.backprop(params, &eval, dg.loss)?) } else { None };
    Ok((metrics, grads))
}

/// Task loss and accuracy of `model` with a separate `head`.
pub fn forward_downstream(params: &ParamSet, head: &ParamSet, cfg: &ModelConfig, batch: &LabeledBatch) -> Result<TaskMetrics> {
    let mut merged = params.clone();
    merged.extend(head.clone());
    Ok(downstream_grads(&merged, cfg, batch, false)?.0)
}

/// Evaluates in chunks of at most `chunk` examples and averages by example
/// count.
pub fn evaluate_task(params: &ParamSet, cfg: &ModelConfig, batch: &LabeledBatch, chunk: usize) -> Result<TaskMetrics> {
    let mut loss = 0.0;
    let mut hits = 0.0;
    let n = batch.len();
    for start in (0..n).step_by(chunk.max(1)) {
        let end = (start + chunk).min(n);
        let part = LabeledBatch {
            task: batch.task,
            tokens: batch.tokens[start..end].to_vec(),
            labels: batch.labels[start..end].to_vec(),
        };
        let (m, _) = downstream_grads(params, cfg, &part, false)?;
        loss += m.loss * part.len() as f64;
        hits += m.accuracy * part.len() as f64;
    }
    Ok(TaskMetrics { loss: loss / n as f64, accuracy: hits / n as f64 })
}

/// Pre-training metrics over several batches, weighted by masked-token and
/// pair counts.
pub fn evaluate_pretrain(params: &ParamSet, cfg: &ModelConfig, batches: &[MaskedBatch]) -> Result<PretrainMetrics> {
    let (mut loss, mut mlm, mut nsp, mut masked, mut pairs) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for b in batches {
        let m = forward_pretrain(params, cfg, b)?;
        let (mc, pc) = (b.masked_count() as f64, b.len() as f64);
        loss += m.loss * pc;
        mlm += m.mlm_accuracy * mc;
        nsp += m.nsp_accuracy * pc;
        masked += mc;
        pairs += pc;
    }
    Ok(PretrainMetrics { loss: loss / pairs, mlm_accuracy: mlm / masked, nsp_accuracy: nsp / pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig { heads: 3, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { layers: 0, ..Default::default() }.validate().is_err());
        assert_eq!(ModelConfig { layers: 2, hidden: 64, heads: 4, ..Default::default() }.head_dim(), 16);
    }

    #[test]
    fn init_is_deterministic_and_well_formed() {
        let a = build_model(ModelConfig::default()).unwrap();
        let b = build_model(ModelConfig::default()).unwrap();
        assert!(a.params.bit_eq(&b.params));
        let c = build_model(ModelConfig { seed: 1, ..Default::default() }).unwrap();
        assert!(!a.params.bit_eq(&c.params));
        for (name, p) in a.params.iter() {
            if name.ends_with(".b") || name.ends_with(".beta") {
                assert!(p.value.data().iter().all(|&v| v == 0.0), "{name}");
            } else if name.ends_with(".gamma") {
                assert!(p.value.data().iter().all(|&v| v == 1.0), "{name}");
            } else {
                assert!(p.value.data().iter().all(|&v| v.abs() <= 2.0 * INIT_STD), "{name}");
            }
        }
        let prunable: Vec<&str> = a.params.prunable().map(|(n, _)| n).collect();
        let mut expected = a.config.prunable_names();
        expected.sort();
        assert_eq!(prunable, expected);
    }

    #[test]
    fn attention_single_token_is_identity() {
        let x = Tensor::matrix(1, 1, vec![0.37]).unwrap();
        let out = attention(&x, &x, &x, 1).unwrap();
        assert_eq!(out.data(), &[0.37]);
    }

    #[test]
    fn attention_zero_query_averages_values() {
        let q = Tensor::zeros(&[1, 2]);
        let k = Tensor::matrix(4, 2, vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.0, 2.0, 2.0]).unwrap();
        let v = Tensor::matrix(4, 3, (0..12).map(f64::from).collect()).unwrap();
        let out = attention(&q, &k, &v, 2).unwrap();
        assert_eq!(out.shape(), &[1, 3]);
        for (j, o) in out.data().iter().enumerate() {
            let mean = (0..4).map(|i| v.data()[i * 3 + j]).sum::<f64>() / 4.0;
            assert!((o - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_shape_errors() {
        let q = Tensor::zeros(&[2, 3]);
        let k = Tensor::zeros(&[4, 2]);
        let v = Tensor::zeros(&[4, 3]);
        assert!(attention(&q, &k, &v, 3).is_err());
        assert!(attention(&q, &Tensor::zeros(&[4, 3]), &Tensor::zeros(&[5, 3]), 3).is_err());
        assert!(attention(&q, &Tensor::zeros(&[4, 3]), &v, 0).is_err());
    }
}
