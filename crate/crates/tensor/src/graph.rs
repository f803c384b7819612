//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; backward walks it once in reverse.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use rand::Rng;

use crate::attention::{self, AttentionLayout, AttentionWeights};
use crate::error::{Result, TensorError};
use crate::kernels::{gemm, softmax_in_place, Operand};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    Sum(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    Transpose(Var),
    Relu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Tensor,
        inv_std: Vec<Real>,
    },
    Dropout {
        x: Var,
        mask: Vec<Real>,
    },
    CrossEntropy {
        logits: Var,
        probs: Tensor,
        targets: Vec<usize>,
        ignore: Option<usize>,
        counted: usize,
    },
    StopGradient,
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        weights: AttentionWeights,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records tensor operations and differentiates scalar results.
///
/// A graph created with [`Graph::no_grad`] evaluates the same operations
/// but never tracks gradients; nothing recorded on it is differentiable.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    params: RefCell<HashMap<ParamId, Var>>,
    grad_enabled: bool,
    backward_done: Cell<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// Inference-mode graph: forward values only.
    pub fn no_grad() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            grad_enabled,
            backward_done: Cell::new(false),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::Numerics { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// Leaf for a stored parameter. Repeated requests for the same parameter
    /// return the same node, so aliased (shared) weights collect a single
    /// summed gradient.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.borrow().get(&id) {
            return Ok(v);
        }
        let v = self.leaf(store.value(id).clone())?;
        self.params.borrow_mut().insert(id, v);
        Ok(v)
    }

    pub fn param_vars(&self) -> Vec<(ParamId, Var)> {
        let mut out: Vec<_> = self.params.borrow().iter().map(|(&p, &v)| (p, v)).collect();
        out.sort_by_key(|(p, _)| p.index());
        out
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Attention probabilities saved by an [`Graph::attention`] node, one
    /// matrix per (segment, head), segment-major.
    pub fn attention_weights(&self, v: Var) -> Option<AttentionWeights> {
        match &self.nodes.borrow()[v.0].op {
            Op::Attention { weights, .. } => Some(weights.clone()),
            _ => None,
        }
    }

    fn shape_err(op: &'static str, left: Shape, right: Shape) -> TensorError {
        TensorError::Shape { op, left, right }
    }

    fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
        TensorError::Invalid {
            op,
            reason: reason.into(),
        }
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.cols() != tb.rows() {
                return Err(Self::shape_err("matmul", ta.shape(), tb.shape()));
            }
            let mut out = Tensor::zeros(ta.rows(), tb.cols());
            gemm(
                Operand::plain(ta.data(), ta.rows(), ta.cols()),
                Operand::plain(tb.data(), tb.rows(), tb.cols()),
                out.data_mut(),
                false,
            );
            out
        };
        self.push(out, Op::MatMul(a, b), self.needs_grad(&[a, b]), "matmul")
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(Self::shape_err("add", ta.shape(), tb.shape()));
            }
            let mut out = ta.clone();
            out.add_assign(tb);
            out
        };
        self.push(out, Op::Add(a, b), self.needs_grad(&[a, b]), "add")
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[bias.0].value);
            if tb.rows() != 1 || tb.cols() != ta.cols() {
                return Err(Self::shape_err("add_row", ta.shape(), tb.shape()));
            }
            let mut out = ta.clone();
            for r in 0..out.rows() {
                for (o, b) in out.row_mut(r).iter_mut().zip(tb.data()) {
                    *o += *b;
                }
            }
            out
        };
        self.push(
            out,
            Op::AddRow(a, bias),
            self.needs_grad(&[a, bias]),
            "add_row",
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(Self::shape_err("mul", ta.shape(), tb.shape()));
            }
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| x * y)
                .collect();
            Tensor::new(ta.rows(), ta.cols(), data)?
        };
        self.push(out, Op::Mul(a, b), self.needs_grad(&[a, b]), "mul")
    }

    pub fn scale(&self, a: Var, factor: Real) -> Result<Var> {
        let out = {
            let t = self.value(a);
            let data = t.data().iter().map(|x| x * factor).collect();
            Tensor::new(t.rows(), t.cols(), data)?
        };
        self.push(out, Op::Scale(a, factor), self.needs_grad(&[a]), "scale")
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.push(
            Tensor::scalar(total),
            Op::Sum(a),
            self.needs_grad(&[a]),
            "sum",
        )
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| Self::invalid("concat_rows", "no inputs"))?;
            let cols = nodes[first.0].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                if t.cols() != cols {
                    return Err(Self::shape_err(
                        "concat_rows",
                        nodes[first.0].value.shape(),
                        t.shape(),
                    ));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::new(rows, cols, data)?
        };
        self.push(
            out,
            Op::ConcatRows(parts.to_vec()),
            self.needs_grad(parts),
            "concat_rows",
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| Self::invalid("concat_cols", "no inputs"))?;
            let rows = nodes[first.0].value.rows();
            let mut cols = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                if t.rows() != rows {
                    return Err(Self::shape_err(
                        "concat_cols",
                        nodes[first.0].value.shape(),
                        t.shape(),
                    ));
                }
                cols += t.cols();
            }
            let mut out = Tensor::zeros(rows, cols);
            for r in 0..rows {
                let mut offset = 0;
                for p in parts {
                    let t = &nodes[p.0].value;
                    out.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
                    offset += t.cols();
                }
            }
            out
        };
        self.push(
            out,
            Op::ConcatCols(parts.to_vec()),
            self.needs_grad(parts),
            "concat_cols",
        )
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let t = self.value(a);
            if start + len > t.rows() {
                return Err(Self::invalid(
                    "slice_rows",
                    format!("rows {start}..{} of {}", start + len, t.shape()),
                ));
            }
            let c = t.cols();
            Tensor::new(len, c, t.data()[start * c..(start + len) * c].to_vec())?
        };
        self.push(
            out,
            Op::SliceRows(a, start),
            self.needs_grad(&[a]),
            "slice_rows",
        )
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let t = self.value(a);
            if start + len > t.cols() {
                return Err(Self::invalid(
                    "slice_cols",
                    format!("cols {start}..{} of {}", start + len, t.shape()),
                ));
            }
            let mut out = Tensor::zeros(t.rows(), len);
            for r in 0..t.rows() {
                out.row_mut(r)
                    .copy_from_slice(&t.row(r)[start..start + len]);
            }
            out
        };
        self.push(
            out,
            Op::SliceCols(a, start),
            self.needs_grad(&[a]),
            "slice_cols",
        )
    }

    /// Gathers rows by index (repeats allowed).
    pub fn select_rows(&self, a: Var, rows: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(a);
            let mut out = Tensor::zeros(rows.len(), t.cols());
            for (i, &r) in rows.iter().enumerate() {
                if r >= t.rows() {
                    return Err(Self::invalid(
                        "select_rows",
                        format!("row {r} of {}", t.shape()),
                    ));
                }
                out.row_mut(i).copy_from_slice(t.row(r));
            }
            out
        };
        self.push(
            out,
            Op::SelectRows(a, rows.to_vec()),
            self.needs_grad(&[a]),
            "select_rows",
        )
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.value(a).transposed();
        self.push(out, Op::Transpose(a), self.needs_grad(&[a]), "transpose")
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let out = {
            let t = self.value(a);
            let data = t.data().iter().map(|&x| x.max(0.0)).collect();
            Tensor::new(t.rows(), t.cols(), data)?
        };
        self.push(out, Op::Relu(a), self.needs_grad(&[a]), "relu")
    }

    /// Row `i` of the result is row `ids[i]` of `table`.
    pub fn embedding_lookup(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(table);
            let mut out = Tensor::zeros(ids.len(), t.cols());
            for (i, &id) in ids.iter().enumerate() {
                if id >= t.rows() {
                    return Err(Self::invalid(
                        "embedding_lookup",
                        format!("id {id} outside table of {} rows", t.rows()),
                    ));
                }
                out.row_mut(i).copy_from_slice(t.row(id));
            }
            out
        };
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push(out, op, self.needs_grad(&[table]), "embedding_lookup")
    }

    /// Row-wise softmax with the row maximum subtracted first.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let out = {
            let mut t = self.value(a).clone();
            for r in 0..t.rows() {
                softmax_in_place(t.row_mut(r));
            }
            t
        };
        self.push(out, Op::Softmax(a), self.needs_grad(&[a]), "softmax_rows")
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// `1 x n` gain and bias.
    pub fn layer_norm_rows(&self, x: Var, gain: Var, bias: Var, eps: Real) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Self::invalid("layer_norm_rows", "eps must be positive"));
        }
        let (out, normalized, inv_std) = {
            let nodes = self.nodes.borrow();
            let (tx, tg, tb) = (
                &nodes[x.0].value,
                &nodes[gain.0].value,
                &nodes[bias.0].value,
            );
            for t in [tg, tb] {
                if t.rows() != 1 || t.cols() != tx.cols() {
                    return Err(Self::shape_err("layer_norm_rows", tx.shape(), t.shape()));
                }
            }
            let n = tx.cols() as Real;
            let mut normalized = tx.clone();
            let mut out = Tensor::zeros(tx.rows(), tx.cols());
            let mut inv_std = Vec::with_capacity(tx.rows());
            for r in 0..tx.rows() {
                let row = normalized.row_mut(r);
                let mean = row.iter().sum::<Real>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
                let is = 1.0 / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * is;
                }
                inv_std.push(is);
                for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                    *o = normalized.row(r)[c] * tg.data()[c] + tb.data()[c];
                }
            }
            (out, normalized, inv_std)
        };
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        };
        self.push(
            out,
            op,
            self.needs_grad(&[x, gain, bias]),
            "layer_norm_rows",
        )
    }

    /// Inverted dropout: zeroes entries with probability `p` and scales the
    /// survivors by `1 / (1 - p)`. `p == 0` returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&self, x: Var, p: Real, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Self::invalid(
                "dropout",
                format!("probability {p} outside [0, 1)"),
            ));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let (out, mask) = {
            let t = self.value(x);
            let mask: Vec<Real> = (0..t.data().len())
                .map(|_| if rng.random::<Real>() < p { 0.0 } else { keep })
                .collect();
            let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
            (Tensor::new(t.rows(), t.cols(), data)?, mask)
        };
        self.push(
            out,
            Op::Dropout { x, mask },
            self.needs_grad(&[x]),
            "dropout",
        )
    }

    /// Mean negative log-likelihood of `targets[i]` under the softmax of row
    /// `i`, skipping rows whose target equals `ignore`. Returns `1 x 1`; zero
    /// when every row is ignored.
    pub fn cross_entropy_rows(
        &self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<Var> {
        let (loss, probs, counted) = {
            let t = self.value(logits);
            if targets.len() != t.rows() {
                return Err(Self::invalid(
                    "cross_entropy_rows",
                    format!("{} targets for {} rows", targets.len(), t.rows()),
                ));
            }
            let mut probs = t.clone();
            let mut total = 0.0;
            let mut counted = 0;
            for (r, &target) in targets.iter().enumerate() {
                if Some(target) == ignore {
                    continue;
                }
                if target >= t.cols() {
                    return Err(Self::invalid(
                        "cross_entropy_rows",
                        format!("target {target} outside {} classes", t.cols()),
                    ));
                }
                let row = t.row(r);
                let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
                let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<Real>().ln();
                total += log_z - row[target];
                for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                    *p = (v - log_z).exp();
                }
                counted += 1;
            }
            let loss = if counted == 0 {
                0.0
            } else {
                total / counted as Real
            };
            (loss, probs, counted)
        };
        let op = Op::CrossEntropy {
            logits,
            probs,
            targets: targets.to_vec(),
            ignore,
            counted,
        };
        self.push(
            Tensor::scalar(loss),
            op,
            self.needs_grad(&[logits]),
            "cross_entropy_rows",
        )
    }

    /// Forward identity that blocks gradient flow to `x`.
    pub fn stop_gradient(&self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false, "stop_gradient")
    }

    /// Segmented multi-head attention `softmax(Q K^T / sqrt(d_head)) V`; see
    /// [`AttentionLayout`]. Heads are concatenated column-wise in the output.
    pub fn attention(&self, q: Var, k: Var, v: Var, layout: &AttentionLayout) -> Result<Var> {
        let (out, weights) = {
            let nodes = self.nodes.borrow();
            let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            layout.validate(tq, tk, tv)?;
            attention::forward(tq, tk, tv, layout)
        };
        let op = Op::Attention {
            q,
            k,
            v,
            layout: layout.clone(),
            weights,
        };
        self.push(out, op, self.needs_grad(&[q, k, v]), "attention")
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.borrow().get(v.0).cloned().flatten()
    }

    /// Clears gradients so that [`Graph::backward`] may run again.
    pub fn reset_grads(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }

    /// Back-propagates from a scalar `loss`. Running it twice without
    /// [`Graph::reset_grads`] in between is an error.
    pub fn backward(&self, loss: Var) -> Result<()> {
        if self.backward_done.get() {
            return Err(TensorError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.0].value.shape();
        if shape != Shape::new(1, 1) {
            return Err(TensorError::NotScalar(shape));
        }
        if !nodes[loss.0].requires_grad {
            return Err(TensorError::NoGradPath);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backward_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn map_tensor(t: &Tensor, f: impl Fn(usize, Real) -> Real) -> Tensor {
    let data = t.data().iter().enumerate().map(|(i, &v)| f(i, v)).collect();
    Tensor::new(t.rows(), t.cols(), data).expect("same shape")
}

fn backward_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let value = |v: Var| &nodes[v.0].value;
    let wants = |v: Var| nodes[v.0].requires_grad;
    match &nodes[id].op {
        Op::Leaf | Op::StopGradient => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (value(*a), value(*b));
            if wants(*a) {
                // dA = dC B^T
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                gemm(
                    Operand::plain(g.data(), g.rows(), g.cols()),
                    Operand::transpose_of(tb.data(), tb.cols(), tb.rows()),
                    ga.data_mut(),
                    false,
                );
                accumulate(nodes, grads, *a, ga);
            }
            if wants(*b) {
                // dB = A^T dC
                let mut gb = Tensor::zeros(tb.rows(), tb.cols());
                gemm(
                    Operand::transpose_of(ta.data(), ta.cols(), ta.rows()),
                    Operand::plain(g.data(), g.rows(), g.cols()),
                    gb.data_mut(),
                    false,
                );
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::AddRow(a, bias) => {
            accumulate(nodes, grads, *a, g.clone());
            if wants(*bias) {
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(nodes, grads, *bias, gb);
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (value(*a), value(*b));
            if wants(*a) {
                accumulate(nodes, grads, *a, map_tensor(g, |i, v| v * tb.data()[i]));
            }
            if wants(*b) {
                accumulate(nodes, grads, *b, map_tensor(g, |i, v| v * ta.data()[i]));
            }
        }
        Op::Scale(a, factor) => accumulate(nodes, grads, *a, map_tensor(g, |_, v| v * factor)),
        Op::Sum(a) => {
            let s = value(*a).shape();
            accumulate(nodes, grads, *a, Tensor::full(s.rows, s.cols, g.item()));
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let s = value(*p).shape();
                if wants(*p) {
                    let c = s.cols;
                    let part = g.data()[offset * c..(offset + s.rows) * c].to_vec();
                    accumulate(
                        nodes,
                        grads,
                        *p,
                        Tensor::new(s.rows, c, part).expect("shape"),
                    );
                }
                offset += s.rows;
            }
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for p in parts {
                let s = value(*p).shape();
                if wants(*p) {
                    let mut gp = Tensor::zeros(s.rows, s.cols);
                    for r in 0..s.rows {
                        gp.row_mut(r)
                            .copy_from_slice(&g.row(r)[offset..offset + s.cols]);
                    }
                    accumulate(nodes, grads, *p, gp);
                }
                offset += s.cols;
            }
        }
        Op::SliceRows(a, start) => {
            let s = value(*a).shape();
            let mut ga = Tensor::zeros(s.rows, s.cols);
            let c = s.cols;
            ga.data_mut()[start * c..start * c + g.data().len()].copy_from_slice(g.data());
            accumulate(nodes, grads, *a, ga);
        }
        Op::SliceCols(a, start) => {
            let s = value(*a).shape();
            let mut ga = Tensor::zeros(s.rows, s.cols);
            for r in 0..s.rows {
                ga.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::SelectRows(a, rows) => {
            let s = value(*a).shape();
            let mut ga = Tensor::zeros(s.rows, s.cols);
            for (i, &r) in rows.iter().enumerate() {
                for (o, v) in ga.row_mut(r).iter_mut().zip(g.row(i)) {
                    *o += v;
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transposed()),
        Op::Relu(a) => {
            let ta = value(*a);
            accumulate(
                nodes,
                grads,
                *a,
                map_tensor(g, |i, v| if ta.data()[i] > 0.0 { v } else { 0.0 }),
            );
        }
        Op::Embedding { table, ids } => {
            let s = value(*table).shape();
            let mut gt = Tensor::zeros(s.rows, s.cols);
            for (i, &id) in ids.iter().enumerate() {
                for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                    *o += v;
                }
            }
            accumulate(nodes, grads, *table, gt);
        }
        Op::Softmax(a) => {
            let y = &nodes[id].value;
            let mut ga = Tensor::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let (yr, gr) = (y.row(r), g.row(r));
                let inner: Real = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                    *o = yr[c] * (gr[c] - inner);
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let tg = value(*gain);
            let n = normalized.cols() as Real;
            if wants(*gain) || wants(*bias) {
                let mut gg = Tensor::zeros(1, normalized.cols());
                let mut gb = Tensor::zeros(1, normalized.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        gg.data_mut()[c] += g.row(r)[c] * normalized.row(r)[c];
                        gb.data_mut()[c] += g.row(r)[c];
                    }
                }
                accumulate(nodes, grads, *gain, gg);
                accumulate(nodes, grads, *bias, gb);
            }
            if wants(*x) {
                let mut gx = Tensor::zeros(g.rows(), g.cols());
                for (r, &is) in inv_std.iter().enumerate() {
                    let xh = normalized.row(r);
                    let dxh: Vec<Real> =
                        g.row(r).iter().zip(tg.data()).map(|(a, b)| a * b).collect();
                    let mean_d = dxh.iter().sum::<Real>() / n;
                    let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<Real>() / n;
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = is * (dxh[c] - mean_d - xh[c] * mean_dx);
                    }
                }
                accumulate(nodes, grads, *x, gx);
            }
        }
        Op::Dropout { x, mask } => accumulate(nodes, grads, *x, map_tensor(g, |i, v| v * mask[i])),
        Op::CrossEntropy {
            logits,
            probs,
            targets,
            ignore,
            counted,
        } => {
            let mut gl = Tensor::zeros(probs.rows(), probs.cols());
            if *counted > 0 {
                let w = g.item() / *counted as Real;
                for (r, &t) in targets.iter().enumerate() {
                    if Some(t) == *ignore {
                        continue;
                    }
                    for (o, p) in gl.row_mut(r).iter_mut().zip(probs.row(r)) {
                        *o = w * p;
                    }
                    gl.row_mut(r)[t] -= w;
                }
            }
            accumulate(nodes, grads, *logits, gl);
        }
        Op::Attention {
            q,
            k,
            v,
            layout,
            weights,
        } => {
            let ag = attention::backward(value(*q), value(*k), value(*v), layout, weights, g);
            accumulate(nodes, grads, *q, ag.q);
            accumulate(nodes, grads, *k, ag.k);
            accumulate(nodes, grads, *v, ag.v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &Graph, rows: usize, cols: usize, data: &[Real]) -> Var {
        g.leaf(Tensor::new(rows, cols, data.to_vec()).unwrap())
            .unwrap()
    }

    #[test]
    fn shared_inputs_sum_their_gradients() {
        let g = Graph::new();
        let x = leaf(&g, 1, 2, &[3.0, -1.0]);
        let y = g
            .add(g.mul(x, x).unwrap(), g.scale(x, 2.0).unwrap())
            .unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[8.0, 0.0]);
    }

    #[test]
    fn backward_runs_once_per_reset() {
        let g = Graph::new();
        let x = leaf(&g, 1, 1, &[2.0]);
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(TensorError::BackwardTwice)));
        g.reset_grads();
        g.backward(loss).unwrap();
    }

    #[test]
    fn backward_needs_a_scalar_with_a_gradient_path() {
        let g = Graph::new();
        let x = leaf(&g, 1, 2, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
        let c = g.constant(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(g.backward(c), Err(TensorError::NoGradPath)));
    }

    #[test]
    fn stop_gradient_keeps_value_and_blocks_gradient() {
        let g = Graph::new();
        let x = leaf(&g, 1, 2, &[1.5, -2.0]);
        let s = g.stop_gradient(x).unwrap();
        assert_eq!(*g.value(s), *g.value(x));
        let loss = g.sum(g.add(g.mul(x, s).unwrap(), x).unwrap()).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.5, -1.0]);
        assert!(g.grad(s).is_none());
    }

    #[test]
    fn no_grad_graphs_record_no_gradients() {
        let g = Graph::no_grad();
        let x = leaf(&g, 1, 1, &[2.0]);
        assert!(!g.grad_enabled());
        assert!(!g.requires_grad(x));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let g = Graph::new();
        let a = leaf(&g, 2, 3, &[0.0; 6]);
        let b = leaf(&g, 2, 3, &[0.0; 6]);
        assert!(g.matmul(a, b).is_err());
        assert!(g.slice_rows(a, 1, 2).is_err());
        assert!(g.select_rows(a, &[2]).is_err());
    }

    #[test]
    fn non_finite_values_are_an_error() {
        let g = Graph::new();
        assert!(g.leaf(Tensor::scalar(Real::INFINITY)).is_err());
        let big = leaf(&g, 1, 1, &[1e300]);
        assert!(g.mul(big, big).is_err());
    }

    #[test]
    fn dropout_rescales_kept_entries() {
        let g = Graph::new();
        let x = leaf(&g, 1, 1000, &[1.0; 1000]);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let y = g.dropout(x, 0.25, &mut rng).unwrap();
        let v = g.value(y);
        assert!(v.data().iter().all(|&a| a == 0.0 || a == 1.0 / 0.75));
    }
}
