//! Tensor-level reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: nodes are appended in evaluation order, so the
//! node vector is already a topological order and [`Graph::backward`] is a
//! single reverse sweep. Leaves may borrow their value (parameters during
//! a forward pass) to avoid copying weights into every tape.

use std::borrow::Cow;
use std::rc::Rc;

use super::array::{
    gemm_nn, gemm_nt, gemm_tn, row_stats, sigmoid, softmax_in_place, softplus, Array, Scalar,
};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row target and weight for the fused categorical NLL.
#[derive(Clone, Debug)]
pub struct CategoricalTargets<T> {
    pub classes: Vec<usize>,
    pub weights: Vec<T>,
}

/// Fused Gaussian-mixture NLL targets: row-major `[rows × dim]` actions.
#[derive(Clone, Debug)]
pub struct MixtureTargets<T> {
    pub actions: Vec<T>,
    pub dim: usize,
    pub weights: Vec<T>,
    pub scale_floor: T,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    MaskedSoftmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    RelBias {
        table: Var,
        head: usize,
        buckets: Rc<Vec<usize>>,
    },
    CrossEntropy {
        logits: Var,
        targets: CategoricalTargets<T>,
    },
    MixtureNll {
        mix: Var,
        mean: Var,
        raw_scale: Var,
        targets: MixtureTargets<T>,
    },
    Sum(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Gather { .. } => "gather",
            Op::RelBias { .. } => "rel_bias",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::MixtureNll { .. } => "mixture_nll",
            Op::Sum(..) => "sum",
        }
    }
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Array<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros if the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var) -> Array<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Array::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Array<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Array::zeros(&self.shapes[v.0]))
    }
}

fn dim_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation kinds in tape order; two graphs with equal kind lists
    /// (and equal shapes) have identical topology.
    pub fn op_kinds(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.nodes.iter().map(|n| n.value.shape().to_vec()).collect()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Owned input; `requires_grad` marks it as a differentiable leaf.
    pub fn input(&mut self, value: Array<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Borrowed differentiable leaf (a model parameter).
    pub fn param(&mut self, value: &'p Array<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed constant leaf.
    pub fn constant(&mut self, value: &'p Array<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (av.dims2(), bv.dims2());
        if k != k2 {
            return Err(dim_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Array::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = (av.dims2(), bv.dims2());
        if k != k2 {
            return Err(dim_err("matmul_bt", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Array::new(vec![m, n], out)?, Op::MatMulBt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err("add", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Broadcast-add a length-`n` row vector to every row of `x[m×n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let (_, n) = xv.dims2();
        if rv.len() != n {
            return Err(dim_err("add_row", xv.shape(), rv.shape()));
        }
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(rv.data()) {
                *o = *o + b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// `x·W + b` for `x[m×k]`, `W[k×n]`, `b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != c || bv.len() != c {
            return Err(dim_err("layer_norm", xv.shape(), gv.shape()));
        }
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            let (mean, rs) = row_stats(row, eps);
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Array::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row softmax where `mask[i*cols + j]` selects which entries take part.
    /// Every row must allow at least one entry.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(dim_err("masked_softmax", xv.shape(), &[m.len()]));
            }
        }
        let mut out = xv.clone();
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            softmax_in_place(row, mask.map(|m| &m[i * c..(i + 1) * c]));
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaskedSoftmax(x), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if start + len > c || len == 0 {
            return Err(dim_err("slice_cols", xv.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv.data()[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Array::new(vec![r, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).dims2().1).collect();
        if parts.iter().any(|&p| self.value(p).dims2().0 != r) {
            return Err(dim_err("concat_cols", &[r], self.value(parts[1]).shape()));
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Array::new(vec![r, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).dims2().1;
        if parts.iter().any(|&p| self.value(p).dims2().1 != c) {
            return Err(dim_err("concat_rows", &[c], self.value(parts[1]).shape()));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let r = out.len() / c;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Array::new(vec![r, c], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Row lookup into `table[v×e]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, e) = tv.dims2();
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Validation(format!(
                "embedding id {bad} out of range for table of {v} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Array::new(vec![ids.len(), e], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `[rows×cols]` matrix whose entry is `table[head, buckets[i*cols+j]]`.
    pub fn rel_bias(
        &mut self,
        table: Var,
        head: usize,
        buckets: Rc<Vec<usize>>,
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        let tv = self.value(table);
        let (_, nb) = tv.dims2();
        if buckets.len() != rows * cols {
            return Err(dim_err("rel_bias", &[rows, cols], &[buckets.len()]));
        }
        let trow = tv.row(head);
        let out: Vec<T> = buckets.iter().map(|&b| trow[b.min(nb - 1)]).collect();
        let rg = self.rg(table);
        Ok(self.push(
            Array::new(vec![rows, cols], out)?,
            Op::RelBias {
                table,
                head,
                buckets,
            },
            rg,
        ))
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[class_i])`
    pub fn cross_entropy(&mut self, logits: Var, targets: CategoricalTargets<T>) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = lv.dims2();
        if targets.classes.len() != r || targets.weights.len() != r {
            return Err(dim_err("cross_entropy", lv.shape(), &[targets.classes.len()]));
        }
        let mut total = T::zero();
        for i in 0..r {
            let row = lv.row(i);
            let cls = targets.classes[i];
            if cls >= c {
                return Err(Error::Validation(format!("target class {cls} ≥ {c}")));
            }
            if targets.weights[i] != T::zero() {
                let lse = super::array::log_sum_exp(row);
                total = total + targets.weights[i] * (lse - row[cls]);
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Array::scalar(total),
            Op::CrossEntropy { logits, targets },
            rg,
        ))
    }

    /// Weighted NLL of a diagonal Gaussian mixture. `mix` is `[rows×K]`
    /// logits; `mean` and `raw_scale` are `[rows×K·dim]`; component scales
    /// are `softplus(raw_scale) + floor`.
    pub fn mixture_nll(
        &mut self,
        mix: Var,
        mean: Var,
        raw_scale: Var,
        targets: MixtureTargets<T>,
    ) -> Result<Var> {
        let (mv, muv, sv) = (self.value(mix), self.value(mean), self.value(raw_scale));
        let (r, k) = mv.dims2();
        let d = targets.dim;
        if muv.dims2() != (r, k * d) || sv.dims2() != (r, k * d) {
            return Err(dim_err("mixture_nll", mv.shape(), muv.shape()));
        }
        if targets.actions.len() != r * d || targets.weights.len() != r {
            return Err(dim_err("mixture_nll", &[r, d], &[targets.actions.len()]));
        }
        let mut total = T::zero();
        let mut comp = vec![T::zero(); k];
        for i in 0..r {
            if targets.weights[i] == T::zero() {
                continue;
            }
            let ll = mixture_row_terms(
                mv.row(i),
                muv.row(i),
                sv.row(i),
                &targets.actions[i * d..(i + 1) * d],
                targets.scale_floor,
                &mut comp,
            );
            total = total - targets.weights[i] * ll;
        }
        let rg = self.rg(mix) || self.rg(mean) || self.rg(raw_scale);
        Ok(self.push(
            Array::scalar(total),
            Op::MixtureNll {
                mix,
                mean,
                raw_scale,
                targets,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Array::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            grads,
            shapes: self.shapes(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Array<T>>], v: Var, g: Array<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Array<T>>],
        v: Var,
        f: impl FnOnce(&mut [T]),
    ) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Array::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop_node(&self, node: &Node<'p, T>, gy: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ((m, k), (_, n)) = (av.dims2(), bv.dims2());
                self.accumulate_with(grads, *a, |ga| gemm_nt(g, bv.data(), ga, m, n, k));
                self.accumulate_with(grads, *b, |gb| gemm_tn(av.data(), g, gb, k, m, n));
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ((m, k), (n, _)) = (av.dims2(), bv.dims2());
                // y = a·bᵀ: da = g·b, db = gᵀ·a
                self.accumulate_with(grads, *a, |ga| gemm_nn(g, bv.data(), ga, m, n, k));
                self.accumulate_with(grads, *b, |gb| gemm_tn(g, av.data(), gb, n, m, k));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, gy.clone());
                let n = self.value(*row).len();
                self.accumulate_with(grads, *row, |gr| {
                    for chunk in g.chunks(n) {
                        for (a, &v) in gr.iter_mut().zip(chunk) {
                            *a = *a + v;
                        }
                    }
                });
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, gy.map(|v| v * *s)),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate_with(grads, *x, |gx| {
                    for ((a, &xi), &gi) in gx.iter_mut().zip(xv).zip(g) {
                        if xi > T::zero() {
                            *a = *a + gi;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let c = gv.len();
                let r = xhat.len() / c;
                self.accumulate_with(grads, *gain, |gg| {
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] = gg[j] + g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                self.accumulate_with(grads, *bias, |gb| {
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] = gb[j] + g[i * c + j];
                        }
                    }
                });
                let nf = T::from_f64(c as f64);
                self.accumulate_with(grads, *x, |gx| {
                    let mut dxhat = vec![T::zero(); c];
                    for i in 0..r {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..c {
                            let d = g[i * c + j] * gv[j];
                            dxhat[j] = d;
                            s1 = s1 + d;
                            s2 = s2 + d * xhat[i * c + j];
                        }
                        let k = rstd[i] / nf;
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j]
                                + k * (nf * dxhat[j] - s1 - xhat[i * c + j] * s2);
                        }
                    }
                });
            }
            Op::MaskedSoftmax(x) => {
                let y = node.value.data();
                let (r, c) = node.value.dims2();
                self.accumulate_with(grads, *x, |gx| {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).dims2();
                let w = node.value.dims2().1;
                self.accumulate_with(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..w {
                            gx[i * c + start + j] = gx[i * c + start + j] + g[i * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    self.accumulate_with(grads, p, |gp| {
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] = gp[i * w + j] + g[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate_with(grads, p, |gp| {
                        for (a, &v) in gp.iter_mut().zip(&g[off..off + len]) {
                            *a = *a + v;
                        }
                    });
                    off += len;
                }
            }
            Op::Gather { table, ids } => {
                let e = self.value(*table).dims2().1;
                self.accumulate_with(grads, *table, |gt| {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..e {
                            gt[id * e + j] = gt[id * e + j] + g[row * e + j];
                        }
                    }
                });
            }
            Op::RelBias {
                table,
                head,
                buckets,
            } => {
                let nb = self.value(*table).dims2().1;
                self.accumulate_with(grads, *table, |gt| {
                    for (&b, &gi) in buckets.iter().zip(g) {
                        let idx = head * nb + b.min(nb - 1);
                        gt[idx] = gt[idx] + gi;
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let (r, c) = lv.dims2();
                let g0 = g[0];
                self.accumulate_with(grads, *logits, |gl| {
                    let mut p = vec![T::zero(); c];
                    for i in 0..r {
                        let w = targets.weights[i];
                        if w == T::zero() {
                            continue;
                        }
                        p.copy_from_slice(lv.row(i));
                        softmax_in_place(&mut p, None);
                        for j in 0..c {
                            let t = if j == targets.classes[i] {
                                T::one()
                            } else {
                                T::zero()
                            };
                            gl[i * c + j] = gl[i * c + j] + g0 * w * (p[j] - t);
                        }
                    }
                });
            }
            Op::MixtureNll {
                mix,
                mean,
                raw_scale,
                targets,
            } => self.backprop_mixture(*mix, *mean, *raw_scale, targets, g[0], grads),
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Array::full(&shape, g[0]));
            }
        }
    }

    fn backprop_mixture(
        &self,
        mix: Var,
        mean: Var,
        raw_scale: Var,
        t: &MixtureTargets<T>,
        g0: T,
        grads: &mut [Option<Array<T>>],
    ) {
        let (mv, muv, sv) = (self.value(mix), self.value(mean), self.value(raw_scale));
        let (r, k) = mv.dims2();
        let d = t.dim;
        let mut gmix = vec![T::zero(); r * k];
        let mut gmu = vec![T::zero(); r * k * d];
        let mut gs = vec![T::zero(); r * k * d];
        let mut comp = vec![T::zero(); k];
        let mut prior = vec![T::zero(); k];
        for i in 0..r {
            let w = t.weights[i];
            if w == T::zero() {
                continue;
            }
            let a = &t.actions[i * d..(i + 1) * d];
            let ll = mixture_row_terms(mv.row(i), muv.row(i), sv.row(i), a, t.scale_floor, &mut comp);
            prior.copy_from_slice(mv.row(i));
            softmax_in_place(&mut prior, None);
            let scale = g0 * w;
            for c in 0..k {
                // posterior responsibility
                let resp = (comp[c] - ll).exp();
                gmix[i * k + c] = scale * (prior[c] - resp);
                for j in 0..d {
                    let idx = i * k * d + c * d + j;
                    let raw = sv.data()[idx];
                    let sigma = softplus(raw) + t.scale_floor;
                    let z = (a[j] - muv.data()[idx]) / sigma;
                    gmu[idx] = -scale * resp * z / sigma;
                    let dsigma = -scale * resp * (z * z - T::one()) / sigma;
                    gs[idx] = dsigma * sigmoid(raw);
                }
            }
        }
        self.accumulate_with(grads, mix, |acc| add_into(acc, &gmix));
        self.accumulate_with(grads, mean, |acc| add_into(acc, &gmu));
        self.accumulate_with(grads, raw_scale, |acc| add_into(acc, &gs));
    }
}

fn add_into<T: Scalar>(acc: &mut [T], g: &[T]) {
    for (a, &v) in acc.iter_mut().zip(g) {
        *a = *a + v;
    }
}

/// Fills `comp[c] = log w_c + log N(a; μ_c, σ_c)` and returns the mixture
/// log-likelihood.
pub(crate) fn mixture_row_terms<T: Scalar>(
    mix: &[T],
    mean: &[T],
    raw_scale: &[T],
    a: &[T],
    floor: T,
    comp: &mut [T],
) -> T {
    let k = mix.len();
    let d = a.len();
    let half_log_2pi = T::from_f64(0.5 * (2.0 * std::f64::consts::PI).ln());
    let lse_mix = super::array::log_sum_exp(mix);
    for c in 0..k {
        let mut lp = mix[c] - lse_mix;
        for j in 0..d {
            let sigma = softplus(raw_scale[c * d + j]) + floor;
            let z = (a[j] - mean[c * d + j]) / sigma;
            lp = lp - T::from_f64(0.5) * z * z - sigma.ln() - half_log_2pi;
        }
        comp[c] = lp;
    }
    super::array::log_sum_exp(comp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
        let n = shape.iter().product();
        Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of `f` at every entry of every input.
    fn check_grad(
        inputs: Vec<Array<f64>>,
        f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
    ) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|a| g.input(a.clone(), true)).collect();
        let loss = f(&mut g, &vars);
        let grads = g.backward(loss).unwrap();
        let eval = |ins: &[Array<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|a| g.input(a.clone(), true)).collect();
            let l = f(&mut g, &vars);
            g.value(l).data()[0]
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (vi, arr) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[vi]);
            for j in 0..arr.len() {
                let mut plus = inputs.clone();
                plus[vi].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[vi].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.data()[j];
                let err = (fd - an).abs() / (1.0f64).max(fd.abs()).max(an.abs());
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let w = g.input(Array::<f64>::full(&[2, 3], 0.7), true);
        let l = g.sum(w);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(w).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_square_norm_gradient_is_w() {
        let w0 = Array::new(vec![1, 3], vec![0.5, -2.0, 1.5f64]).unwrap();
        let mut g = Graph::new();
        let w = g.input(w0.clone(), true);
        let sq = g.matmul_bt(w, w).unwrap();
        let l = g.scale(sq, 0.5);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), w0.data());
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let a = g.input(Array::<f64>::full(&[2], 1.0), true);
        let b = g.input(Array::<f64>::full(&[3], 1.0), true);
        let l = g.sum(a);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get_or_zeros(b).data(), &[0.0; 3]);
    }

    #[test]
    fn primitives_match_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_array(&mut rng, &[3, 4]);
            let b = rand_array(&mut rng, &[4, 2]);
            let bt = rand_array(&mut rng, &[5, 4]);
            let row = rand_array(&mut rng, &[2]);
            let gain = rand_array(&mut rng, &[4]);
            let bias = rand_array(&mut rng, &[4]);
            let tol = 1e-6;

            let e = check_grad(vec![a.clone(), b.clone(), row.clone()], |g, v| {
                let y = g.linear(v[0], v[1], v[2]).unwrap();
                let y = g.relu(y);
                let y2 = g.matmul_bt(y, y).unwrap();
                g.sum(y2)
            });
            assert!(e < tol, "linear/relu {e}");

            let e = check_grad(vec![a.clone(), bt.clone()], |g, v| {
                let s = g.matmul_bt(v[0], v[1]).unwrap();
                let mask: Vec<bool> = (0..15).map(|i| i % 5 <= i / 5 + 1).collect();
                let p = g.masked_softmax(s, Some(&mask)).unwrap();
                let q = g.matmul(p, v[1]).unwrap();
                let q2 = g.matmul_bt(q, q).unwrap();
                g.sum(q2)
            });
            assert!(e < tol, "softmax {e}");

            let e = check_grad(vec![a.clone(), gain.clone(), bias.clone()], |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                let y2 = g.matmul_bt(y, y).unwrap();
                let y2 = g.scale(y2, 0.3);
                g.sum(y2)
            });
            assert!(e < 1e-5, "layer_norm {e}");

            let e = check_grad(vec![a.clone(), bt.clone()], |g, v| {
                let s1 = g.slice_cols(v[0], 1, 2).unwrap();
                let s2 = g.slice_cols(v[0], 0, 2).unwrap();
                let c = g.concat_cols(&[s1, s2, v[0]]).unwrap();
                let r = g.concat_rows(&[v[0], v[1]]).unwrap();
                let x = g.matmul_bt(c, c).unwrap();
                let y = g.matmul_bt(r, r).unwrap();
                let sx = g.sum(x);
                let sy = g.sum(y);
                g.add(sx, sy).unwrap()
            });
            assert!(e < tol, "concat/slice {e}");

            let table = rand_array(&mut rng, &[4, 5]);
            let e = check_grad(vec![table.clone()], |g, v| {
                let y = g.gather(v[0], &[0, 2, 2, 3]).unwrap();
                let b = Rc::new(vec![0, 1, 4, 2, 2, 3]);
                let rb = g.rel_bias(v[0], 1, b, 2, 3).unwrap();
                let z = g.matmul_bt(y, y).unwrap();
                let w = g.matmul_bt(rb, rb).unwrap();
                let z = g.sum(z);
                let w = g.sum(w);
                g.add(z, w).unwrap()
            });
            assert!(e < tol, "gather/rel_bias {e}");

            let logits = rand_array(&mut rng, &[4, 5]);
            let e = check_grad(vec![logits], |g, v| {
                g.cross_entropy(
                    v[0],
                    CategoricalTargets {
                        classes: vec![0, 4, 2, 2],
                        weights: vec![0.25, 0.5, 0.0, 1.0],
                    },
                )
                .unwrap()
            });
            assert!(e < tol, "cross_entropy {e}");

            let (rows, k, d) = (3, 2, 2);
            let mix = rand_array(&mut rng, &[rows, k]);
            let mu = rand_array(&mut rng, &[rows, k * d]);
            let sc = rand_array(&mut rng, &[rows, k * d]);
            let acts: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e = check_grad(vec![mix, mu, sc], |g, v| {
                g.mixture_nll(
                    v[0],
                    v[1],
                    v[2],
                    MixtureTargets {
                        actions: acts.clone(),
                        dim: d,
                        weights: vec![1.0, 0.5, 0.25],
                        scale_floor: 1e-4,
                    },
                )
                .unwrap()
            });
            assert!(e < 1e-5, "mixture {e}");
        }
    }

    #[test]
    fn topology_is_precision_independent() {
        fn build<T: Scalar>() -> Vec<&'static str> {
            let mut g = Graph::<T>::new();
            let a = g.input(Array::full(&[2, 3], T::one()), true);
            let b = g.input(Array::full(&[3, 2], T::one()), false);
            let c = g.matmul(a, b).unwrap();
            let d = g.relu(c);
            let _ = g.sum(d);
            g.op_kinds()
        }
        assert_eq!(build::<f32>(), build::<f64>());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.input(Array::<f64>::full(&[2], 1.0), true);
        assert!(matches!(g.backward(a), Err(Error::Usage(_))));
    }
}
