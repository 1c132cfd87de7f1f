//! Tape-based reverse-mode differentiation.
//!
//! Forward computations are recorded as a linear sequence of primitive
//! nodes; each node stores its operands, its computed value, and enough
//! information to apply the local adjoint rule in reverse. Values are
//! produced by the same kernels as the plain forward path, so replaying a
//! tape reproduces the recorded outputs bit-exactly.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, sigmoid};
use crate::numerics::{Prng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    /// Input tensor; `param` names it as a gradient target.
    Leaf { param: Option<String> },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// Matrix plus a rank-1 bias on every row.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Rows of a table selected by index; grad scatter-adds back.
    GatherRows(NodeId, Vec<usize>),
    RmsNormRows { x: NodeId, gamma: NodeId, eps: f64 },
    /// Mask is a constant, never differentiated.
    SoftmaxMasked { scores: NodeId, mask: Tensor },
    Silu(NodeId),
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    /// Mean cross-entropy of `logits` rows against target ids; scalar out.
    CrossEntropy { logits: NodeId, pairs: Vec<(usize, u32)> },
    ScalarAdd(NodeId, NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients for marked parameters, keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input; adjoints are propagated past it but never stored.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: None }, value, false)
    }

    /// Marked parameter; `reverse_gradients` reports its gradient by name.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push(
            Op::Leaf {
                param: Some(name.to_string()),
            },
            value,
            true,
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(Op::Transpose(a), value, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = kernels::add(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = kernels::add_row_broadcast(self.value(x), self.value(bias))?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Op::AddRow(x, bias), value, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = kernels::scale(self.value(a), c);
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), value, rg)
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch("gather_rows needs a matrix".into()));
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= t.rows() {
                return Err(Error::InvalidArgument(format!(
                    "gather_rows index {i} out of {} rows",
                    t.rows()
                )));
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![ids.len(), cols], data)?;
        let rg = self.rg(table);
        Ok(self.push(Op::GatherRows(table, ids.to_vec()), value, rg))
    }

    pub fn rms_norm_rows(&mut self, x: NodeId, gamma: NodeId, eps: f64) -> Result<NodeId> {
        let value = kernels::rms_norm_rows(self.value(x), self.value(gamma), eps)?;
        let rg = self.rg(x) || self.rg(gamma);
        Ok(self.push(Op::RmsNormRows { x, gamma, eps }, value, rg))
    }

    pub fn softmax_masked(&mut self, scores: NodeId, mask: &Tensor) -> Result<NodeId> {
        let value = kernels::row_softmax_masked(self.value(scores), mask)?;
        let rg = self.rg(scores);
        Ok(self.push(
            Op::SoftmaxMasked {
                scores,
                mask: mask.clone(),
            },
            value,
            rg,
        ))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let value = kernels::silu(self.value(a));
        let rg = self.rg(a);
        self.push(Op::Silu(a), value, rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.value(x);
        if t.rank() != 2 || start + len > t.cols() {
            return Err(Error::ShapeMismatch(format!(
                "slice_cols [{start}, {start}+{len}) of {:?}",
                t.shape()
            )));
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::SliceCols { x, start, len }, value, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        }
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let t = self.value(p);
                if t.rows() != rows {
                    return Err(Error::ShapeMismatch("concat_cols row mismatch".into()));
                }
                data.extend_from_slice(t.row(i));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, rg))
    }

    /// Mean of -log softmax(logits[row])[target] over the given pairs.
    pub fn cross_entropy(&mut self, logits: NodeId, pairs: &[(usize, u32)]) -> Result<NodeId> {
        let t = self.value(logits);
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch("cross_entropy needs a matrix".into()));
        }
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("cross_entropy with no targets".into()));
        }
        let cols = t.cols();
        let mut total = 0.0;
        for &(row, target) in pairs {
            if row >= t.rows() || target as usize >= cols {
                return Err(Error::InvalidArgument(format!(
                    "cross_entropy target ({row}, {target}) out of range"
                )));
            }
            total += -log_softmax_at(t.row(row), target as usize);
        }
        let value = Tensor::vector(vec![total / pairs.len() as f64]);
        let rg = self.rg(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                pairs: pairs.to_vec(),
            },
            value,
            rg,
        ))
    }

    pub fn scalar_add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).numel() != 1 || self.value(b).numel() != 1 {
            return Err(Error::ShapeMismatch("scalar_add on non-scalars".into()));
        }
        let value = Tensor::vector(vec![self.value(a).data()[0] + self.value(b).data()[0]]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::ScalarAdd(a, b), value, rg))
    }

    /// Recomputes every node from its operands in recorded order and checks
    /// the results against the stored values bitwise.
    pub fn replay_matches(&self) -> bool {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = |id: &NodeId| &values[id.0];
            let recomputed = match &node.op {
                Op::Leaf { .. } => node.value.clone(),
                Op::MatMul(a, b) => kernels::matmul(v(a), v(b)).unwrap(),
                Op::Transpose(a) => v(a).transpose(),
                Op::Add(a, b) => kernels::add(v(a), v(b)).unwrap(),
                Op::AddRow(x, bias) => kernels::add_row_broadcast(v(x), v(bias)).unwrap(),
                Op::Scale(a, c) => kernels::scale(v(a), *c),
                Op::GatherRows(t, ids) => {
                    let table = v(t);
                    let mut data = Vec::new();
                    for &i in ids {
                        data.extend_from_slice(table.row(i));
                    }
                    Tensor::new(vec![ids.len(), table.cols()], data).unwrap()
                }
                Op::RmsNormRows { x, gamma, eps } => {
                    kernels::rms_norm_rows(v(x), v(gamma), *eps).unwrap()
                }
                Op::SoftmaxMasked { scores, mask } => {
                    kernels::row_softmax_masked(v(scores), mask).unwrap()
                }
                Op::Silu(a) => kernels::silu(v(a)),
                Op::SliceCols { x, start, len } => {
                    let t = v(x);
                    let mut data = Vec::new();
                    for i in 0..t.rows() {
                        data.extend_from_slice(&t.row(i)[*start..*start + *len]);
                    }
                    Tensor::new(vec![t.rows(), *len], data).unwrap()
                }
                Op::ConcatCols(parts) => {
                    let rows = v(&parts[0]).rows();
                    let mut data = Vec::new();
                    for i in 0..rows {
                        for p in parts {
                            data.extend_from_slice(v(p).row(i));
                        }
                    }
                    let total: usize = parts.iter().map(|p| v(p).cols()).sum();
                    Tensor::new(vec![rows, total], data).unwrap()
                }
                Op::CrossEntropy { logits, pairs } => {
                    let t = v(logits);
                    let mut total = 0.0;
                    for &(row, target) in pairs {
                        total += -log_softmax_at(t.row(row), target as usize);
                    }
                    Tensor::vector(vec![total / pairs.len() as f64])
                }
                Op::ScalarAdd(a, b) => {
                    Tensor::vector(vec![v(a).data()[0] + v(b).data()[0]])
                }
            };
            if !recomputed.bit_eq(&node.value) {
                return false;
            }
            values.push(recomputed);
        }
        true
    }

    /// Reverse pass from a scalar loss node. Returns the gradient of every
    /// marked parameter; unmarked leaves get no gradient storage, though
    /// adjoints still flow through interior nodes that depend on them.
    pub fn reverse_gradients(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adjoints: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        )?);

        for idx in (0..=loss.0).rev() {
            let Some(grad) = adjoints[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            match &self.nodes[idx].op {
                // Keep leaf adjoints around for collection below.
                Op::Leaf { .. } => adjoints[idx] = Some(grad),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let da = kernels::matmul(&grad, &self.value(*b).transpose())?;
                        accumulate(&mut adjoints, *a, da);
                    }
                    if self.rg(*b) {
                        let db = kernels::matmul(&self.value(*a).transpose(), &grad)?;
                        accumulate(&mut adjoints, *b, db);
                    }
                }
                Op::Transpose(a) => {
                    if self.rg(*a) {
                        accumulate(&mut adjoints, *a, grad.transpose());
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut adjoints, *a, grad.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut adjoints, *b, grad.clone());
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.rg(*x) {
                        accumulate(&mut adjoints, *x, grad.clone());
                    }
                    if self.rg(*bias) {
                        let n = grad.cols();
                        let mut db = vec![0.0; n];
                        for i in 0..grad.rows() {
                            for (acc, &g) in db.iter_mut().zip(grad.row(i)) {
                                *acc += g;
                            }
                        }
                        accumulate(&mut adjoints, *bias, Tensor::vector(db));
                    }
                }
                Op::Scale(a, c) => {
                    if self.rg(*a) {
                        accumulate(&mut adjoints, *a, kernels::scale(&grad, *c));
                    }
                }
                Op::GatherRows(table, ids) => {
                    if self.rg(*table) {
                        let t = self.value(*table);
                        let mut dt = Tensor::zeros(t.shape().to_vec());
                        for (out_row, &src_row) in ids.iter().enumerate() {
                            let g = grad.row(out_row);
                            for (acc, &gv) in dt.row_mut(src_row).iter_mut().zip(g) {
                                *acc += gv;
                            }
                        }
                        accumulate(&mut adjoints, *table, dt);
                    }
                }
                Op::RmsNormRows { x, gamma, eps } => {
                    let xs = self.value(*x);
                    let gs = self.value(*gamma);
                    let d = xs.cols();
                    let mut dx = Tensor::zeros(xs.shape().to_vec());
                    let mut dgamma = vec![0.0; d];
                    for i in 0..xs.rows() {
                        let xr = xs.row(i);
                        let gr = grad.row(i);
                        let mut ms = 0.0;
                        for &v in xr {
                            ms += v * v;
                        }
                        ms = ms / d as f64 + eps;
                        let r = ms.sqrt();
                        let mut dot = 0.0;
                        for k in 0..d {
                            dot += gr[k] * gs.data()[k] * xr[k];
                        }
                        let coef = dot / (d as f64 * r * ms);
                        for k in 0..d {
                            dx.row_mut(i)[k] = gr[k] * gs.data()[k] / r - xr[k] * coef;
                            dgamma[k] += gr[k] * xr[k] / r;
                        }
                    }
                    if self.rg(*x) {
                        accumulate(&mut adjoints, *x, dx);
                    }
                    if self.rg(*gamma) {
                        accumulate(&mut adjoints, *gamma, Tensor::vector(dgamma));
                    }
                }
                Op::SoftmaxMasked { scores, .. } => {
                    if self.rg(*scores) {
                        let p = &self.nodes[idx].value;
                        let mut ds = Tensor::zeros(p.shape().to_vec());
                        for i in 0..p.rows() {
                            let pr = p.row(i);
                            let gr = grad.row(i);
                            let mut dot = 0.0;
                            for (pv, gv) in pr.iter().zip(gr) {
                                dot += pv * gv;
                            }
                            for (k, out) in ds.row_mut(i).iter_mut().enumerate() {
                                *out = pr[k] * (gr[k] - dot);
                            }
                        }
                        accumulate(&mut adjoints, *scores, ds);
                    }
                }
                Op::Silu(a) => {
                    if self.rg(*a) {
                        let xs = self.value(*a);
                        let data = xs
                            .data()
                            .iter()
                            .zip(grad.data())
                            .map(|(&x, &g)| {
                                let s = sigmoid(x);
                                g * s * (1.0 + x * (1.0 - s))
                            })
                            .collect();
                        accumulate(
                            &mut adjoints,
                            *a,
                            Tensor::new(xs.shape().to_vec(), data)?,
                        );
                    }
                }
                Op::SliceCols { x, start, len } => {
                    if self.rg(*x) {
                        let t = self.value(*x);
                        let mut dx = Tensor::zeros(t.shape().to_vec());
                        for i in 0..t.rows() {
                            dx.row_mut(i)[*start..*start + *len].copy_from_slice(grad.row(i));
                        }
                        accumulate(&mut adjoints, *x, dx);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.rg(p) {
                            let rows = grad.rows();
                            let mut dp = Tensor::zeros(vec![rows, w]);
                            for i in 0..rows {
                                dp.row_mut(i).copy_from_slice(&grad.row(i)[offset..offset + w]);
                            }
                            accumulate(&mut adjoints, p, dp);
                        }
                        offset += w;
                    }
                }
                Op::CrossEntropy { logits, pairs } => {
                    if self.rg(*logits) {
                        let t = self.value(*logits);
                        let g = grad.data()[0] / pairs.len() as f64;
                        let mut dl = Tensor::zeros(t.shape().to_vec());
                        for &(row, target) in pairs {
                            let probs = softmax_row(t.row(row));
                            let dr = dl.row_mut(row);
                            for (k, p) in probs.iter().enumerate() {
                                let y = if k == target as usize { 1.0 } else { 0.0 };
                                dr[k] += g * (p - y);
                            }
                        }
                        accumulate(&mut adjoints, *logits, dl);
                    }
                }
                Op::ScalarAdd(a, b) => {
                    let g = grad.data()[0];
                    if self.rg(*a) {
                        let shape = self.value(*a).shape().to_vec();
                        accumulate(&mut adjoints, *a, Tensor::new(shape, vec![g])?);
                    }
                    if self.rg(*b) {
                        let shape = self.value(*b).shape().to_vec();
                        accumulate(&mut adjoints, *b, Tensor::new(shape, vec![g])?);
                    }
                }
            }
        }

        let mut grads = Gradients::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                let g = adjoints[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                grads.insert(name.clone(), g);
            }
        }
        Ok(grads)
    }
}

fn accumulate(adjoints: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut adjoints[id.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for &v in row {
        denom += (v - max).exp();
    }
    (row[idx] - max) - denom.ln()
}

/// Builds the computation at the given parameter values and returns
/// (tape, loss node). Used by the finite-difference checker to re-evaluate
/// the objective at perturbed points.
pub type LossBuilder<'a> = dyn Fn(&BTreeMap<String, Tensor>) -> Result<(GradTape, NodeId)> + 'a;

/// Central-difference validation of `reverse_gradients`.
///
/// Samples up to `max_coords` parameter coordinates, recomputes the loss at
/// +/- step along each, and returns the maximum relative deviation of the
/// finite-difference slope from the reverse-mode gradient. The denominator
/// is floored at 1.0 so coordinates with near-zero slope compare absolutely
/// (central differences bottom out around 1e-11 of float noise there).
pub fn finite_difference_check(
    build: &LossBuilder,
    params: &BTreeMap<String, Tensor>,
    step: f64,
    max_coords: usize,
    rng: &mut Prng,
) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    let (tape, loss) = build(params)?;
    let grads = tape.reverse_gradients(loss)?;

    let mut coords: Vec<(String, usize)> = Vec::new();
    for (name, t) in params {
        for i in 0..t.numel() {
            coords.push((name.clone(), i));
        }
    }
    // Sample without replacement when there are more coordinates than budget.
    if coords.len() > max_coords {
        let picked = rng.sample_without_replacement(coords.len(), max_coords)?;
        coords = picked.into_iter().map(|p| coords[p - 1].clone()).collect();
    }

    let mut worst: f64 = 0.0;
    for (name, i) in coords {
        let eval = |delta: f64| -> Result<f64> {
            let mut shifted = params.clone();
            let t = shifted.get_mut(&name).unwrap();
            t.data_mut()[i] += delta;
            let (tape, loss) = build(&shifted)?;
            Ok(tape.value(loss).data()[0])
        };
        let fd = (eval(step)? - eval(-step)?) / (2.0 * step);
        let ad = grads
            .get(&name)
            .map(|g| g.data()[i])
            .ok_or_else(|| Error::Contract(format!("no gradient recorded for {name}")))?;
        let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
