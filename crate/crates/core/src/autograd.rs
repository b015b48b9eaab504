//! A small define-then-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in construction order, so the node list is already a
//! topological order: every operand of a node has a smaller index. A graph is
//! symbolic; [`Graph::evaluate`] binds parameters and named inputs, and
//! [`Graph::backprop`] walks the cached forward values in reverse.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamSet, TensorMap};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, softmax_in_place, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Input(String),
    Param(String),
    Constant(Tensor),
    /// Batched matrix product over the last two axes. `b` may be rank 2, in
    /// which case it is shared by every batch of `a`.
    MatMul { a: NodeId, b: NodeId, transpose_b: bool },
    Add(NodeId, NodeId),
    /// Adds a vector along the last axis.
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    /// Row lookup: output shape is `ids.shape ++ [table.cols]`.
    Gather { table: NodeId, ids: NodeId },
    Reshape(NodeId, Vec<usize>),
    Permute(NodeId, Vec<usize>),
    /// Weighted mean of per-row softmax cross-entropy; rows with zero weight
    /// are ignored.
    CrossEntropy { logits: NodeId, targets: NodeId, weights: Option<NodeId> },
    Sum(NodeId),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Constant(_) => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Constant(_) => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::Reshape(a, _)
            | Op::Permute(a, _)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Gather { table, ids } => vec![*table, *ids],
            Op::CrossEntropy { logits, targets, weights } => {
                let mut v = vec![*logits, *targets];
                v.extend(weights);
                v
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    label: String,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Forward values of every node from one [`Graph::evaluate`] call.
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<Tensor>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn scalar(&self, id: NodeId) -> Option<f64> {
        self.values[id.0].item()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn push(&mut self, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        for operand in op.operands() {
            assert!(operand.0 < id.0, "operand {operand:?} does not precede node {id:?}");
        }
        let label = format!("{}#{}", op.kind(), id.0);
        self.nodes.push(Node { op, label });
        id
    }

    /// Gives a node a readable label used in error messages.
    pub fn name(&mut self, id: NodeId, label: impl Into<String>) -> NodeId {
        self.nodes[id.0].label = label.into();
        id
    }

    pub fn label(&self, id: NodeId) -> &str {
        &self.nodes[id.0].label
    }

    pub fn find(&self, label: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.label == label).map(NodeId)
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        let id = self.push(Op::Input(name.to_string()));
        self.name(id, name)
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        let id = self.push(Op::Param(name.to_string()));
        self.name(id, name)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant(t))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { a, b, transpose_b: false })
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { a, b, transpose_b: true })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias(a, bias))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Gelu(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        self.push(Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn gather(&mut self, table: NodeId, ids: NodeId) -> NodeId {
        self.push(Op::Gather { table, ids })
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        self.push(Op::Permute(a, axes.to_vec()))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: NodeId, weights: Option<NodeId>) -> NodeId {
        self.push(Op::CrossEntropy { logits, targets, weights })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    /// Evaluates every node in order. Parameters are read from `params`,
    /// `Op::Input` nodes from `inputs`.
    pub fn evaluate(&self, params: &ParamSet, inputs: &BTreeMap<String, Tensor>) -> Result<Evaluation> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = self
                .forward_node(&node.op, &values, params, inputs)
                .map_err(|e| match e {
                    Error::Shape(m) | Error::InvalidArgument(m) => Error::node(&node.label, m),
                    other => other,
                })?;
            if !v.is_finite() {
                return Err(Error::NonFinite(node.label.clone()));
            }
            values.push(v);
        }
        Ok(Evaluation { values })
    }

    fn forward_node(
        &self,
        op: &Op,
        values: &[Tensor],
        params: &ParamSet,
        inputs: &BTreeMap<String, Tensor>,
    ) -> Result<Tensor> {
        let val = |id: &NodeId| &values[id.0];
        Ok(match op {
            Op::Input(name) => inputs
                .get(name)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("input `{name}` is not bound")))?,
            Op::Param(name) => params.tensor(name)?.clone(),
            Op::Constant(t) => t.clone(),
            Op::MatMul { a, b, transpose_b } => matmul_forward(val(a), val(b), *transpose_b)?,
            Op::Add(a, b) => {
                let (a, b) = (val(a), val(b));
                same_shape(a, b, "add")?;
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::AddBias(a, bias) => {
                let (a, bias) = (val(a), val(bias));
                let n = a.last_dim();
                if bias.len() != n {
                    return Err(Error::Shape(format!("bias {:?} vs input {:?}", bias.shape(), a.shape())));
                }
                let mut out = a.clone();
                for row in out.data_mut().chunks_mut(n) {
                    for (x, b) in row.iter_mut().zip(bias.data()) {
                        *x += b;
                    }
                }
                out
            }
            Op::Mul(a, b) => {
                let (a, b) = (val(a), val(b));
                same_shape(a, b, "mul")?;
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::Scale(a, c) => val(a).map(|x| x * c),
            Op::Tanh(a) => val(a).map(f64::tanh),
            Op::Gelu(a) => val(a).map(gelu),
            Op::Softmax(a) => crate::tensor::softmax_rows(val(a)),
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta) = (val(x), val(gamma), val(beta));
                let n = x.last_dim();
                if gamma.len() != n || beta.len() != n {
                    return Err(Error::Shape(format!(
                        "layer norm params {:?}/{:?} vs input {:?}",
                        gamma.shape(),
                        beta.shape(),
                        x.shape()
                    )));
                }
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(n) {
                    let (mean, rstd) = moments(row, *eps);
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = (*v - mean) * rstd * gamma.data()[j] + beta.data()[j];
                    }
                }
                out
            }
            Op::Gather { table, ids } => {
                let (table, ids) = (val(table), val(ids));
                if table.rank() != 2 {
                    return Err(Error::Shape(format!("gather table must be 2-D, got {:?}", table.shape())));
                }
                let (rows, cols) = (table.shape()[0], table.shape()[1]);
                let mut data = Vec::with_capacity(ids.len() * cols);
                for &raw in ids.data() {
                    let r = as_index(raw, rows)?;
                    data.extend_from_slice(&table.data()[r * cols..(r + 1) * cols]);
                }
                let mut shape = ids.shape().to_vec();
                shape.push(cols);
                Tensor::new(shape, data)?
            }
            Op::Reshape(a, shape) => val(a).reshaped(shape)?,
            Op::Permute(a, axes) => permute(val(a), axes)?,
            Op::CrossEntropy { logits, targets, weights } => {
                let (logits, targets) = (val(logits), val(targets));
                let weights = weights.as_ref().map(val);
                let (_, loss) = cross_entropy_parts(logits, targets, weights)?;
                Tensor::scalar(loss)
            }
            Op::Sum(a) => Tensor::scalar(val(a).sum()),
        })
    }

    /// Reverse pass from a scalar `loss` node. Returns one gradient per entry
    /// of `params`; parameters the loss does not reach get a zero tensor.
    pub fn backprop(&self, params: &ParamSet, eval: &Evaluation, loss: NodeId) -> Result<TensorMap> {
        if eval.values.len() != self.nodes.len() {
            return Err(Error::InvalidArgument("evaluation does not belong to this graph".into()));
        }
        if eval.value(loss).len() != 1 {
            return Err(Error::node(
                &self.nodes[loss.0].label,
                format!("loss must be scalar, has shape {:?}", eval.value(loss).shape()),
            ));
        }

        // Only nodes downstream of a parameter carry gradients.
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = match &node.op {
                Op::Param(_) => true,
                Op::Input(_) | Op::Constant(_) => false,
                op => op.operands().iter().any(|o| needs[o.0]),
            };
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(eval.value(loss).shape(), 1.0));
        let mut out = params.zeros_like();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !needs[i] {
                continue;
            }
            let node = &self.nodes[i];
            if let Op::Param(name) = &node.op {
                if let Some(acc) = out.get_mut(name) {
                    add_into(acc.data_mut(), g.data());
                }
                continue;
            }
            self.backward_node(&node.op, &g, &eval.values[i], eval, &needs, &mut grads)
                .map_err(|e| match e {
                    Error::Shape(m) | Error::InvalidArgument(m) => Error::node(&node.label, m),
                    other => other,
                })?;
        }
        Ok(out)
    }

    fn backward_node(
        &self,
        op: &Op,
        g: &Tensor,
        y: &Tensor,
        eval: &Evaluation,
        needs: &[bool],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let val = |id: &NodeId| &eval.values[id.0];
        let mut send = |id: NodeId, delta: Vec<f64>, shape: &[usize]| {
            if !needs[id.0] {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => add_into(acc.data_mut(), &delta),
                slot @ None => *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient shape")),
            }
        };
        match op {
            Op::Input(_) | Op::Param(_) | Op::Constant(_) => {}
            Op::MatMul { a, b, transpose_b } => {
                let (av, bv) = (val(a), val(b));
                let (batches, m, k, n, b_batched) = matmul_dims(av, bv, *transpose_b)?;
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                let gd = g.data();
                for t in 0..batches {
                    let a_t = &av.data()[t * m * k..(t + 1) * m * k];
                    let boff = if b_batched { t * k * n } else { 0 };
                    let b_t = &bv.data()[boff..boff + k * n];
                    let g_t = &gd[t * m * n..(t + 1) * m * n];
                    let da_t = &mut da[t * m * k..(t + 1) * m * k];
                    let db_t = &mut db[boff..boff + k * n];
                    if *transpose_b {
                        gemm_acc(g_t, b_t, da_t, m, n, k);
                        gemm_tn_acc(g_t, a_t, db_t, m, n, k);
                    } else {
                        gemm_nt_acc(g_t, b_t, da_t, m, n, k);
                        gemm_tn_acc(a_t, g_t, db_t, m, k, n);
                    }
                }
                send(*a, da, av.shape());
                send(*b, db, bv.shape());
            }
            Op::Add(a, b) => {
                send(*a, g.data().to_vec(), g.shape());
                send(*b, g.data().to_vec(), g.shape());
            }
            Op::AddBias(a, bias) => {
                let bv = val(bias);
                let mut db = vec![0.0; bv.len()];
                for row in g.data().chunks(bv.len()) {
                    add_into(&mut db, row);
                }
                send(*a, g.data().to_vec(), g.shape());
                send(*bias, db, bv.shape());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let da = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let db = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                send(*a, da, av.shape());
                send(*b, db, bv.shape());
            }
            Op::Scale(a, c) => send(*a, g.data().iter().map(|x| x * c).collect(), g.shape()),
            Op::Tanh(a) => {
                let d = g.data().iter().zip(y.data()).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
                send(*a, d, g.shape());
            }
            Op::Gelu(a) => {
                let x = val(a);
                let d = g.data().iter().zip(x.data()).map(|(gi, &xi)| gi * gelu_grad(xi)).collect();
                send(*a, d, g.shape());
            }
            Op::Softmax(a) => {
                let n = y.last_dim();
                let mut d = vec![0.0; y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(p, q)| p * q).sum();
                    for ((dv, yv), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv = yv * (gv - dot);
                    }
                }
                send(*a, d, y.shape());
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (xv, gv) = (val(x), val(gamma));
                let n = xv.last_dim();
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for ((xrow, grow), dxrow) in xv.data().chunks(n).zip(g.data().chunks(n)).zip(dx.chunks_mut(n)) {
                    let (mean, rstd) = moments(xrow, *eps);
                    for j in 0..n {
                        xhat[j] = (xrow[j] - mean) * rstd;
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                        dxhat[j] = grow[j] * gv.data()[j];
                    }
                    let mean_d: f64 = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dxrow[j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                send(*x, dx, xv.shape());
                send(*gamma, dgamma, gv.shape());
                send(*beta, dbeta, val(beta).shape());
            }
            Op::Gather { table, ids } => {
                let (tv, iv) = (val(table), val(ids));
                let (rows, cols) = (tv.shape()[0], tv.shape()[1]);
                let mut dt = vec![0.0; tv.len()];
                for (k, &raw) in iv.data().iter().enumerate() {
                    let r = as_index(raw, rows)?;
                    add_into(&mut dt[r * cols..(r + 1) * cols], &g.data()[k * cols..(k + 1) * cols]);
                }
                send(*table, dt, tv.shape());
            }
            Op::Reshape(a, _) => send(*a, g.data().to_vec(), val(a).shape()),
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let back = permute(g, &inverse)?;
                send(*a, back.into_data(), val(a).shape());
            }
            Op::CrossEntropy { logits, targets, weights } => {
                let (lv, tv) = (val(logits), val(targets));
                let wv = weights.as_ref().map(val);
                let (probs, _) = cross_entropy_parts(lv, tv, wv)?;
                let c = lv.last_dim();
                let rows = lv.len() / c;
                let total_w: f64 = (0..rows).map(|r| wv.map_or(1.0, |w| w.data()[r])).sum();
                let scale = g.data()[0] / total_w;
                let mut d = probs;
                for r in 0..rows {
                    let w = wv.map_or(1.0, |w| w.data()[r]);
                    let t = as_index(tv.data()[r], c)?;
                    let row = &mut d[r * c..(r + 1) * c];
                    if w == 0.0 {
                        row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= w * scale);
                }
                send(*logits, d, lv.shape());
            }
            Op::Sum(a) => {
                let av = val(a);
                send(*a, vec![g.data()[0]; av.len()], av.shape());
            }
        }
        Ok(())
    }
}

/// Evaluates `graph` and returns the values of the requested nodes keyed by
/// node label.
pub fn evaluate_graph(
    graph: &Graph,
    params: &ParamSet,
    inputs: &BTreeMap<String, Tensor>,
    outputs: &[NodeId],
) -> Result<BTreeMap<String, Tensor>> {
    let eval = graph.evaluate(params, inputs)?;
    Ok(outputs.iter().map(|&id| (graph.label(id).to_string(), eval.value(id).clone())).collect())
}

fn add_into(acc: &mut [f64], delta: &[f64]) {
    for (a, d) in acc.iter_mut().zip(delta) {
        *a += d;
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn as_index(raw: f64, bound: usize) -> Result<usize> {
    if raw < 0.0 || raw.fract() != 0.0 || raw as usize >= bound {
        return Err(Error::InvalidArgument(format!("index {raw} out of range 0..{bound}")));
    }
    Ok(raw as usize)
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn matmul_dims(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<(usize, usize, usize, usize, bool)> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::Shape(format!("matmul needs rank >= 2, got {:?} x {:?}", a.shape(), b.shape())));
    }
    let (ar, br) = (a.rank(), b.rank());
    let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (bk, n) = if transpose_b {
        (b.shape()[br - 1], b.shape()[br - 2])
    } else {
        (b.shape()[br - 2], b.shape()[br - 1])
    };
    let b_batched = br == ar && br > 2;
    if k != bk || (br != 2 && (!b_batched || a.shape()[..ar - 2] != b.shape()[..br - 2])) {
        return Err(Error::Shape(format!(
            "matmul{} {:?} x {:?}",
            if transpose_b { "ᵀ" } else { "" },
            a.shape(),
            b.shape()
        )));
    }
    let batches = a.shape()[..ar - 2].iter().product();
    Ok((batches, m, k, n, b_batched))
}

fn matmul_forward(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
    let (batches, m, k, n, b_batched) = matmul_dims(a, b, transpose_b)?;
    let mut out = vec![0.0; batches * m * n];
    for t in 0..batches {
        let a_t = &a.data()[t * m * k..(t + 1) * m * k];
        let boff = if b_batched { t * k * n } else { 0 };
        let b_t = &b.data()[boff..boff + k * n];
        let c_t = &mut out[t * m * n..(t + 1) * m * n];
        if transpose_b {
            gemm_nt_acc(a_t, b_t, c_t, m, k, n);
        } else {
            gemm_acc(a_t, b_t, c_t, m, k, n);
        }
    }
    let mut shape = a.shape()[..a.rank() - 1].to_vec();
    shape.push(n);
    Tensor::new(shape, out)
}

fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::Shape(format!("bad permutation {axes:?} for shape {:?}", x.shape())));
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0; rank];
    let src = x.data();
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(src[base + j * inner_stride]);
        }
        // advance all but the innermost axis
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return Tensor::new(out_shape, out);
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Softmax probabilities of `logits` and the weighted mean cross-entropy.
fn cross_entropy_parts(logits: &Tensor, targets: &Tensor, weights: Option<&Tensor>) -> Result<(Vec<f64>, f64)> {
    if logits.rank() != 2 {
        return Err(Error::Shape(format!("cross entropy logits must be 2-D, got {:?}", logits.shape())));
    }
    let (rows, c) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != rows || weights.is_some_and(|w| w.len() != rows) {
        return Err(Error::Shape(format!(
            "cross entropy: {rows} rows but {} targets / {:?} weights",
            targets.len(),
            weights.map(|w| w.len())
        )));
    }
    let mut probs = logits.data().to_vec();
    let mut total = 0.0;
    let mut total_w = 0.0;
    for r in 0..rows {
        let w = weights.map_or(1.0, |w| w.data()[r]);
        if w < 0.0 {
            return Err(Error::InvalidArgument(format!("negative weight {w} at row {r}")));
        }
        let t = as_index(targets.data()[r], c)?;
        let row = &mut probs[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        if w > 0.0 {
            total += w * (lse - row[t]);
            total_w += w;
        }
        softmax_in_place(row);
    }
    if total_w == 0.0 {
        return Err(Error::InvalidArgument("cross entropy over zero total weight".into()));
    }
    Ok((probs, total / total_w))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(pairs: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn linear_scaling() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.scale(x, 2.0);
        let out = evaluate_graph(&g, &ParamSet::new(), &inputs(&[("x", Tensor::vector(vec![1.0, 3.0]))]), &[y])
            .unwrap();
        assert_eq!(out.values().next().unwrap().data(), &[2.0, 6.0]);
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.softmax(x);
        let e = g.evaluate(&ParamSet::new(), &inputs(&[("x", Tensor::vector(vec![0.0; 3]))])).unwrap();
        for v in e.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_gradient() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::matrix(1, 1, vec![0.7]).unwrap(), true);
        let mut g = Graph::new();
        let w = g.param("w");
        let x = g.constant(Tensor::matrix(1, 1, vec![3.0]).unwrap());
        let y = g.matmul(w, x);
        let loss = g.sum(y);
        let e = g.evaluate(&ps, &BTreeMap::new()).unwrap();
        let grads = g.backprop(&ps, &e, loss).unwrap();
        assert_eq!(grads["w"].data(), &[3.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::vector(vec![0.3, -1.2, 2.0, 0.1]), true);
        let mut g = Graph::new();
        let w = g.param("w");
        let s = g.softmax(w);
        let loss = g.sum(s);
        let e = g.evaluate(&ps, &BTreeMap::new()).unwrap();
        let grads = g.backprop(&ps, &e, loss).unwrap();
        assert!(grads["w"].data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn unreached_parameter_gets_zero_gradient() {
        let mut ps = ParamSet::new();
        ps.insert("used", Tensor::vector(vec![1.0, 2.0]), true);
        ps.insert("unused", Tensor::vector(vec![5.0]), true);
        let mut g = Graph::new();
        let u = g.param("used");
        let loss = g.sum(u);
        let e = g.evaluate(&ps, &BTreeMap::new()).unwrap();
        let grads = g.backprop(&ps, &e, loss).unwrap();
        assert_eq!(grads["unused"].data(), &[0.0]);
        assert_eq!(grads["used"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::vector(vec![1.0, 2.0]), true);
        let mut g = Graph::new();
        let w = g.param("w");
        let e = g.evaluate(&ps, &BTreeMap::new()).unwrap();
        assert!(g.backprop(&ps, &e, w).is_err());
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let c = g.matmul(a, b);
        g.name(c, "scores");
        let err = g
            .evaluate(
                &ParamSet::new(),
                &inputs(&[("a", Tensor::zeros(&[2, 3])), ("b", Tensor::zeros(&[2, 3]))]),
            )
            .unwrap_err();
        assert!(err.to_string().contains("scores"), "{err}");
    }

    #[test]
    fn non_finite_names_the_node() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.scale(a, f64::MAX);
        let c = g.scale(b, 10.0);
        g.name(c, "overflow");
        let err = g.evaluate(&ParamSet::new(), &inputs(&[("a", Tensor::vector(vec![1.0]))])).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref n) if n == "overflow"), "{err}");
    }

    #[test]
    fn permute_round_trip() {
        let x = Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[k][i][j] == x[i][j][k]
        assert_eq!(p.data()[1 * 6 + 1 * 3 + 2], x.data()[1 * 12 + 2 * 4 + 1]);
        let back = permute(&p, &[1, 2, 0]).unwrap();
        assert!(back.bit_eq(&x));
    }
}
