use std::borrow::Cow;
use std::ops::Range;

use super::{logsumexp_slice, matmul_into, row_moments, Rng, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Band of key positions a query row may attend to.
///
/// Query row `i` sits at key position `i + query_offset` and may attend key
/// `j` iff `pos - left <= j <= pos + right`. `None` leaves a side unbounded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionWindow {
    pub query_offset: usize,
    pub left: Option<usize>,
    pub right: Option<usize>,
}

impl AttentionWindow {
    /// Half-open range of permitted keys for query row `i` among `n_keys`.
    pub fn keys(&self, i: usize, n_keys: usize) -> Range<usize> {
        let pos = i + self.query_offset;
        let lo = self.left.map_or(0, |l| pos.saturating_sub(l));
        let hi = self.right.map_or(n_keys, |r| (pos + r + 1).min(n_keys));
        lo.min(hi)..hi
    }
}

/// Backward rule for operations defined outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Tanh(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LogSoftmax(Var),
    Softmax(Var),
    LogSumExp(Var, usize),
    MaskedSoftmax(Var),
    Dropout(Var, Vec<f64>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    RelativeGather {
        x: Var,
        query_offset: usize,
        max_offset: usize,
    },
    PairAdd(Var, Var),
    Sum(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation. Node order is a topological order,
/// so the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient, borrowing its value.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(t), true)
    }

    /// Leaf that owns its value.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(t), requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(t), false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, Op::Scale(x, c), &[x])
    }

    /// Adds the vector `b` to every row of the matrix `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (_, c) = matrix_dims(xv, "add_row")?;
        if bv.len() != c {
            return Err(shape_err("add_row", xv, bv));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        self.push("add_row", out, Op::AddRow(x, b), &[x, b])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(x), &[x])
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.len() != d || bv.len() != d {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let rows = xv.len() / d.max(1);
        let mut xhat = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = xv.clone();
        for (r, (xh, o)) in xhat
            .chunks_mut(d)
            .zip(out.data_mut().chunks_mut(d))
            .enumerate()
        {
            let (mean, is) = row_moments(xv.row(r), eps);
            inv_std.push(is);
            for k in 0..d {
                xh[k] = (xh[k] - mean) * is;
                o[k] = xh[k] * gv.data()[k] + bv.data()[k];
            }
        }
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let last = xv.rank().checked_sub(1).ok_or_else(|| Error::invalid("log_softmax of a scalar"))?;
        let out = xv.log_softmax(last)?;
        self.push("log_softmax", out, Op::LogSoftmax(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let last = xv.rank().checked_sub(1).ok_or_else(|| Error::invalid("softmax of a scalar"))?;
        let out = xv.softmax(last)?;
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).logsumexp(axis)?;
        self.push("logsumexp", out, Op::LogSumExp(x, axis), &[x])
    }

    /// Row softmax restricted to each row's window; entries outside are 0.
    pub fn masked_softmax(&mut self, x: Var, window: AttentionWindow) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = matrix_dims(xv, "masked_softmax")?;
        let mut out = Tensor::zeros([r, c]);
        for i in 0..r {
            let keys = window.keys(i, c);
            if keys.is_empty() {
                return Err(Error::invalid(format!("query row {i} has no permitted keys")));
            }
            let row = &xv.row(i)[keys.clone()];
            let lse = logsumexp_slice(row);
            for (o, &s) in out.row_mut(i)[keys].iter_mut().zip(row) {
                *o = (s - lse).exp();
            }
        }
        self.push("masked_softmax", out, Op::MaskedSoftmax(x), &[x])
    }

    /// Inverted dropout: zeroes with probability `ratio` and rescales the
    /// survivors. Identity unless `training`.
    pub fn dropout(&mut self, x: Var, ratio: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::invalid(format!("dropout ratio {ratio} outside [0, 1)")));
        }
        if !training || ratio == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - ratio);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.uniform() < ratio { 0.0 } else { keep })
            .collect();
        let mut out = xv.clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push("dropout", out, Op::Dropout(x, mask), &[x])
    }

    pub fn slice_rows(&mut self, x: Var, rows: Range<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = matrix_dims(xv, "slice_rows")?;
        if rows.end > r || rows.start > rows.end {
            return Err(Error::invalid(format!("row range {rows:?} out of {r}")));
        }
        let out = Tensor::new([rows.len(), c], xv.data()[rows.start * c..rows.end * c].to_vec())?;
        self.push("slice_rows", out, Op::SliceRows(x, rows.start), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, cols: Range<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = matrix_dims(xv, "slice_cols")?;
        if cols.end > c || cols.start > cols.end {
            return Err(Error::invalid(format!("column range {cols:?} out of {c}")));
        }
        let mut data = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[cols.clone()]);
        }
        let out = Tensor::new([r, cols.len()], data)?;
        self.push("slice_cols", out, Op::SliceCols(x, cols.start), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let (r, _) = matrix_dims(self.value(*first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = matrix_dims(self.value(p), "concat_cols")?;
            if pr != r {
                return Err(shape_err("concat_cols", self.value(*first), self.value(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new([r, total], data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Stacks `table[ids[i]]` as row `i` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (r, c) = matrix_dims(tv, "gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::invalid(format!("row id {id} out of {r}")));
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new([ids.len(), c], data)?;
        self.push("gather_rows", out, Op::GatherRows(table, ids.to_vec()), &[table])
    }

    /// Expands per-offset scores `x[i, k]`, `k` indexing relative offsets
    /// `-max_offset..=max_offset`, into a query×key matrix:
    /// `out[i, j] = x[i, clamp(i + query_offset - j) + max_offset]`.
    pub fn relative_gather(
        &mut self,
        x: Var,
        n_keys: usize,
        query_offset: usize,
        max_offset: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = matrix_dims(xv, "relative_gather")?;
        if c != 2 * max_offset + 1 {
            return Err(Error::invalid(format!(
                "relative table width {c} does not cover offsets ±{max_offset}"
            )));
        }
        let mut out = Tensor::zeros([r, n_keys]);
        for i in 0..r {
            for j in 0..n_keys {
                let k = relative_index(i + query_offset, j, max_offset);
                out.data_mut()[i * n_keys + j] = xv.get2(i, k);
            }
        }
        self.push(
            "relative_gather",
            out,
            Op::RelativeGather {
                x,
                query_offset,
                max_offset,
            },
            &[x],
        )
    }

    /// All pairwise row sums: row `t * n_b + u` is `a[t] + b[u]`.
    pub fn pair_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, ca) = matrix_dims(av, "pair_add")?;
        let (rb, cb) = matrix_dims(bv, "pair_add")?;
        if ca != cb {
            return Err(shape_err("pair_add", av, bv));
        }
        let mut data = Vec::with_capacity(ra * rb * ca);
        for t in 0..ra {
            for u in 0..rb {
                data.extend(av.row(t).iter().zip(bv.row(u)).map(|(x, y)| x + y));
            }
        }
        let out = Tensor::new([ra * rb, ca], data)?;
        self.push("pair_add", out, Op::PairAdd(a, b), &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    /// Records an externally computed value with a custom backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        self.push(name, value, Op::Custom(inputs.to_vec(), op), inputs)
    }

    /// Reverse sweep from a scalar root. Gradients are retained for leaves.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward from non-scalar of shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(rv.shape().to_vec()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            self.propagate(node, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds into a zero-initialized gradient buffer shaped like `v`.
    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
        f(buf.data_mut());
    }

    fn propagate(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = g.matmul(&bv.transpose()?)?;
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let (m, k) = matrix_dims(av, "matmul")?;
                    let n = bv.cols();
                    let at = av.transpose()?;
                    let mut gb = vec![0.0; k * n];
                    matmul_into(at.data(), g.data(), &mut gb, k, m, n);
                    self.accumulate(grads, *b, Tensor::new([k, n], gb)?);
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()?),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g.mul(self.value(*b))?);
                self.accumulate(grads, *b, g.mul(self.value(*a))?);
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * c)),
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                let c = g.cols();
                self.accumulate_with(grads, *b, |buf| {
                    for row in g.data().chunks(c) {
                        for (o, v) in buf.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let gx = g.zip(y, "tanh", |gv, yv| gv * (1.0 - yv * yv))?;
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let gx = g.zip(self.value(*x), "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = g.cols();
                let gain_v = self.value(*gain).data();
                self.accumulate_with(grads, *bias, |buf| {
                    for row in g.data().chunks(d) {
                        for (o, v) in buf.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
                self.accumulate_with(grads, *gain, |buf| {
                    for (row, xh) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for k in 0..d {
                            buf[k] += row[k] * xh[k];
                        }
                    }
                });
                self.accumulate_with(grads, *x, |buf| {
                    let mut dxhat = vec![0.0; d];
                    for (r, ((row, xh), out)) in g
                        .data()
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(buf.chunks_mut(d))
                        .enumerate()
                    {
                        for k in 0..d {
                            dxhat[k] = row[k] * gain_v[k];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for k in 0..d {
                            out[k] += inv_std[r] * (dxhat[k] - mean_d - xh[k] * mean_dx);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let d = y.cols();
                self.accumulate_with(grads, *x, |buf| {
                    for ((gr, yr), out) in g.data().chunks(d).zip(y.data().chunks(d)).zip(buf.chunks_mut(d)) {
                        let total: f64 = gr.iter().sum();
                        for k in 0..d {
                            out[k] += gr[k] - yr[k].exp() * total;
                        }
                    }
                });
            }
            Op::Softmax(x) | Op::MaskedSoftmax(x) => {
                let d = y.cols();
                self.accumulate_with(grads, *x, |buf| {
                    for ((gr, yr), out) in g.data().chunks(d).zip(y.data().chunks(d)).zip(buf.chunks_mut(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for k in 0..d {
                            out[k] += yr[k] * (gr[k] - dot);
                        }
                    }
                });
            }
            Op::LogSumExp(x, axis) => {
                let xv = self.value(*x);
                let (outer, n, inner) = xv.axis_split(*axis, "logsumexp")?;
                self.accumulate_with(grads, *x, |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let (gy, yy) = (g.data()[o * inner + i], y.data()[o * inner + i]);
                            for k in 0..n {
                                let idx = (o * n + k) * inner + i;
                                buf[idx] += gy * (xv.data()[idx] - yy).exp();
                            }
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => {
                let gx = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(mask).map(|(a, m)| a * m).collect(),
                )?;
                self.accumulate(grads, *x, gx);
            }
            Op::SliceRows(x, start) => {
                let c = g.cols();
                self.accumulate_with(grads, *x, |buf| {
                    for (o, v) in buf[start * c..start * c + g.len()].iter_mut().zip(g.data()) {
                        *o += v;
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let c = self.value(*x).cols();
                let w = g.cols();
                self.accumulate_with(grads, *x, |buf| {
                    for (i, row) in g.data().chunks(w).enumerate() {
                        for (o, v) in buf[i * c + start..i * c + start + w].iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate_with(grads, p, |buf| {
                        for (i, out) in buf.chunks_mut(w).enumerate() {
                            for (o, v) in out.iter_mut().zip(&g.data()[i * total + start..i * total + start + w]) {
                                *o += v;
                            }
                        }
                    });
                    start += w;
                }
            }
            Op::GatherRows(table, ids) => {
                let c = g.cols();
                self.accumulate_with(grads, *table, |buf| {
                    for (row, &id) in g.data().chunks(c).zip(ids) {
                        for (o, v) in buf[id * c..(id + 1) * c].iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Op::RelativeGather {
                x,
                query_offset,
                max_offset,
            } => {
                let n_keys = g.cols();
                let width = 2 * max_offset + 1;
                self.accumulate_with(grads, *x, |buf| {
                    for (i, row) in g.data().chunks(n_keys).enumerate() {
                        for (j, v) in row.iter().enumerate() {
                            buf[i * width + relative_index(i + query_offset, j, *max_offset)] += v;
                        }
                    }
                });
            }
            Op::PairAdd(a, b) => {
                let rb = self.value(*b).rows();
                let c = g.cols();
                self.accumulate_with(grads, *a, |buf| {
                    for (r, row) in g.data().chunks(c).enumerate() {
                        let t = r / rb;
                        for (o, v) in buf[t * c..(t + 1) * c].iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
                self.accumulate_with(grads, *b, |buf| {
                    for (r, row) in g.data().chunks(c).enumerate() {
                        let u = r % rb;
                        for (o, v) in buf[u * c..(u + 1) * c].iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate_with(grads, *x, |buf| buf.iter_mut().for_each(|o| *o += gv));
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = op.backward(&values, y, g)?;
                for (v, gi) in inputs.iter().zip(gs) {
                    self.accumulate(grads, *v, gi);
                }
            }
        }
        Ok(())
    }
}

fn relative_index(query_pos: usize, key: usize, max_offset: usize) -> usize {
    let offset = query_pos as i64 - key as i64;
    let m = max_offset as i64;
    (offset.clamp(-m, m) + m) as usize
}
