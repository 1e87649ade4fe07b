//! Tape-based reverse-mode differentiation over 2-D `f64` blocks.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! tape in reverse. Parameters enter the tape once per graph (repeated uses
//! of the same name share a node, which is how tied embeddings accumulate
//! both gradient contributions).

use std::collections::{BTreeMap, HashMap};

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;

pub type NodeId = usize;

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Op {
    Input,
    Param,
    MatMul(NodeId, NodeId),
    MatMulTransB(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<String, NodeId>,
}

fn check_same(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Row-wise softmax; every row must contain at least one finite entry.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z: f64 = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
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

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Brings a named parameter onto the tape, reusing the node on repeat use.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_nodes.get(name) {
            return Ok(id);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?
            .clone();
        let id = self.push(value, Op::Param);
        self.param_nodes.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                va.dim(),
                vb.dim()
            )));
        }
        let v = va.dot(vb);
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(Error::Shape(format!(
                "matmul_t {:?} x {:?}ᵀ",
                va.dim(),
                vb.dim()
            )));
        }
        let v = va.dot(&vb.t());
        Ok(self.push(v, Op::MatMulTransB(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same(self.value(a), self.value(b), "add")?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(Error::Shape(format!(
                "add_row {:?} + {:?}",
                va.dim(),
                vr.dim()
            )));
        }
        let v = va + vr;
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a) * factor;
        self.push(v, Op::Scale(a, factor))
    }

    /// Adds a constant block (attention masks); gradient passes straight through.
    pub fn add_const(&mut self, a: NodeId, c: &Array2<f64>) -> Result<NodeId> {
        check_same(self.value(a), c, "add_const")?;
        let v = self.value(a) + c;
        Ok(self.push(v, Op::AddConst(a)))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    /// Per-row normalization to zero mean and unit variance, then `γ ⊙ x̂ + β`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let n = vx.ncols();
        for (p, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(p).dim() != (1, n) {
                return Err(Error::Shape(format!(
                    "layer_norm {what} {:?} for width {n}",
                    self.value(p).dim()
                )));
            }
        }
        let mut xhat = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let v = &xhat * self.value(gamma) + self.value(beta);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views)
            .map_err(|e| Error::Shape(format!("concat_rows: {e}")))?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views)
            .map_err(|e| Error::Shape(format!("concat_cols: {e}")))?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start + width > va.ncols() {
            return Err(Error::Shape(format!(
                "slice_cols {start}+{width} of {}",
                va.ncols()
            )));
        }
        let v = va.slice(s![.., start..start + width]).to_owned();
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vt.nrows()) {
            return Err(Error::Shape(format!(
                "gather row {bad} of table with {} rows",
                vt.nrows()
            )));
        }
        let v = vt.select(Axis(0), ids);
        Ok(self.push(v, Op::Gather(table, ids.to_vec())))
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId> {
        let vl = self.value(logits);
        if vl.nrows() != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: {} logit rows for {} targets",
                vl.nrows(),
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= vl.ncols()) {
            return Err(Error::Shape(format!(
                "target {bad} outside vocabulary of {}",
                vl.ncols()
            )));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::EmptyTarget);
        }
        let mut total = 0.0;
        for (row, t) in vl.rows().into_iter().zip(targets) {
            if let Some(t) = *t {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
        }
        let probs = softmax_rows(vl);
        let loss = Array2::from_elem((1, 1), total / count as f64);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss >= self.nodes.len() {
            return Err(Error::BackwardBeforeForward(format!(
                "node {loss} not on a tape of {} nodes",
                self.nodes.len()
            )));
        }
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).dim()
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Array2::ones((1, 1)));

        for id in (0..=loss).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input | Op::Param => {}
                Op::MatMul(a, b) => {
                    let da = dy.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&dy);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulTransB(a, b) => {
                    let da = dy.dot(self.value(*b));
                    let db = dy.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, dy.clone());
                    accumulate(&mut grads, *a, dy.clone());
                }
                Op::AddRow(a, r) => {
                    let dr = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *r, dr);
                    accumulate(&mut grads, *a, dy.clone());
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, &dy * *f),
                Op::AddConst(a) => accumulate(&mut grads, *a, dy.clone()),
                Op::Softmax(a) => {
                    let p = &node.value;
                    let mut dx = &dy * p;
                    for (mut row, prow) in dx.rows_mut().into_iter().zip(p.rows()) {
                        let dot: f64 = row.sum();
                        row.zip_mut_with(&prow, |d, &pv| *d -= pv * dot);
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let dgamma = (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbeta = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let mut dx = &dy * self.value(*gamma);
                    let n = dx.ncols() as f64;
                    for ((mut row, xrow), is) in dx
                        .rows_mut()
                        .into_iter()
                        .zip(xhat.rows())
                        .zip(inv_std.iter())
                    {
                        let mean_d = row.sum() / n;
                        let mean_dx = row.iter().zip(xrow.iter()).map(|(d, x)| d * x).sum::<f64>() / n;
                        row.zip_mut_with(&xrow, |d, &xh| *d = is * (*d - mean_d - xh * mean_dx));
                    }
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu(a) => {
                    let mut dx = self.value(*a).mapv(gelu_grad);
                    dx *= &dy;
                    accumulate(&mut grads, *a, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).nrows();
                        accumulate(
                            &mut grads,
                            p,
                            dy.slice(s![start..start + rows, ..]).to_owned(),
                        );
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let cols = self.value(p).ncols();
                        accumulate(
                            &mut grads,
                            p,
                            dy.slice(s![.., start..start + cols]).to_owned(),
                        );
                        start += cols;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    da.slice_mut(s![.., *start..*start + dy.ncols()]).assign(&dy);
                    accumulate(&mut grads, *a, da);
                }
                Op::Gather(table, ids) => {
                    let mut dt = Array2::zeros(self.value(*table).dim());
                    for (row, &i) in dy.rows().into_iter().zip(ids) {
                        let mut target = dt.row_mut(i);
                        target += &row;
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let count = targets.iter().filter(|t| t.is_some()).count() as f64;
                    let scale = dy[[0, 0]] / count;
                    let mut dl = Array2::zeros(probs.dim());
                    for ((mut row, prow), t) in
                        dl.rows_mut().into_iter().zip(probs.rows()).zip(targets)
                    {
                        if let Some(t) = *t {
                            row.assign(&prow);
                            row[t] -= 1.0;
                            row *= scale;
                        }
                    }
                    accumulate(&mut grads, *logits, dl);
                }
            }
            grads[id] = Some(dy);
        }

        let params = self
            .param_nodes
            .iter()
            .map(|(name, &id)| (name.clone(), id))
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    params: BTreeMap<String, NodeId>,
}

impl Gradients {
    /// Gradient with respect to any node; `None` when the node does not
    /// influence the loss.
    pub fn wrt(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    /// Parameter gradients by name. Parameters on the tape that do not reach
    /// the loss get zero blocks.
    pub fn into_params(mut self, store: &ParamStore) -> BTreeMap<String, Array2<f64>> {
        let mut out = BTreeMap::new();
        for (name, id) in std::mem::take(&mut self.params) {
            let g = self.grads[id]
                .take()
                .unwrap_or_else(|| Array2::zeros(store.get(&name).map_or((0, 0), |p| p.dim())));
            out.insert(name, g);
        }
        out
    }
}
