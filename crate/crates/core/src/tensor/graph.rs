//! Reverse-mode tape.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the backward pass. `backward` walks the tape once in reverse, so the
//! node index order is a valid topological order by construction.

use std::borrow::Cow;

use super::ops::{self, LayerNormCache};
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    /// `[m, n] + [n]` broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, F),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache<F>,
    },
    Gelu(Var),
    SoftmaxRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    /// Row `positions[i]` of the output is row `i` of `src`; all other rows are `fill`.
    ScatterRows {
        src: Var,
        fill: Var,
        positions: Vec<usize>,
    },
    MeanRows(Var),
    /// Flat gather: `out[i] = x[index[i]]`.
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    MaskedL1 {
        y: Var,
        target: Vec<F>,
        mask: Vec<bool>,
        alpha: F,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Vec<F>,
        probs: Vec<F>,
    },
    SumScalars(Vec<Var>),
}

struct Node<'a, F: Real> {
    value: Cow<'a, Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<'a, F: Real> {
    nodes: Vec<Node<'a, F>>,
}

impl<F: Real> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Row-wise softmax cross-entropy against (possibly soft) targets, averaged
/// over rows. Zero-weight target entries contribute nothing, so logits of
/// `-inf` on classes with zero target mass are allowed.
pub(crate) fn soft_cross_entropy<F: Real>(
    logits: &[F],
    target: &[F],
    classes: usize,
) -> (F, Vec<F>) {
    let rows = logits.len() / classes;
    let mut probs = vec![F::zero(); logits.len()];
    let mut total = F::zero();
    for r in 0..rows {
        let z = &logits[r * classes..(r + 1) * classes];
        let t = &target[r * classes..(r + 1) * classes];
        let max = z.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let sum: F = z.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for c in 0..classes {
            probs[r * classes + c] = (z[c] - max).exp() / sum;
            if t[c] != F::zero() {
                total = total - t[c] * (z[c] - lse);
            }
        }
    }
    (total / F::lit(rows as f64), probs)
}

impl<'a, F: Real> Graph<'a, F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<F>>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(name)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Cow::Owned(value), op, rg))
    }

    /// Trainable leaf borrowed from a parameter table.
    pub fn param(&mut self, t: &'a Tensor<F>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Leaf that receives a gradient but is owned by the graph.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.value(v).shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a 2-D tensor, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        self.push_op("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_bt", a)?;
        let (n, k2) = self.dims2("matmul_bt", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_bt",
                format!("{:?} x {:?}ᵀ", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = vec![F::zero(); m * n];
        ops::matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        self.push_op("matmul_bt", out, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push_op("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let cols = xv.cols();
        if bv.numel() != cols {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + bias {:?}", xv.shape(), bv.shape()),
            ));
        }
        let b = bv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % cols])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push_op("add_row", out, Op::AddRow(x, bias), &[x, bias])
    }

    /// `x · w + b` for `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v * c).collect())?;
        self.push_op("scale", out, Op::Scale(x, c), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (out, cache) =
            ops::layer_norm_cached(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.push_op(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            &[x, gamma, beta],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = ops::gelu(self.value(x))?;
        self.push_op("gelu", out, Op::Gelu(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() == 0 {
            return Err(Error::shape("softmax", "empty softmax axis"));
        }
        let mut out = vec![F::zero(); xv.numel()];
        ops::softmax_rows_into(xv.data(), &mut out, xv.cols());
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push_op("softmax", out, Op::SoftmaxRows(x), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("slice_cols", x)?;
        if start + width > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of {cols}", start + width),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + width]);
        }
        let out = Tensor::new(vec![rows, width], data)?;
        self.push_op("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let (rows, _) = self.dims2("concat_cols", *first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != rows {
                return Err(Error::shape("concat_cols", format!("row counts {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        self.push_op("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.dims2("gather_rows", x)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {n}")));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(src.row(r));
        }
        let out = Tensor::new(vec![rows.len(), cols], data)?;
        let op = Op::GatherRows {
            x,
            rows: rows.to_vec(),
        };
        self.push_op("gather_rows", out, op, &[x])
    }

    /// Builds an `n`-row matrix with `src` rows at `positions` and the single
    /// row `fill` everywhere else.
    pub fn scatter_rows(&mut self, src: Var, fill: Var, positions: &[usize], n: usize) -> Result<Var> {
        let (count, cols) = self.dims2("scatter_rows", src)?;
        if count != positions.len() {
            return Err(Error::shape(
                "scatter_rows",
                format!("{count} rows for {} positions", positions.len()),
            ));
        }
        if self.value(fill).numel() != cols {
            return Err(Error::shape(
                "scatter_rows",
                format!("fill {:?} for width {cols}", self.value(fill).shape()),
            ));
        }
        let mut slot = vec![None; n];
        for (i, &p) in positions.iter().enumerate() {
            if p >= n || slot[p].is_some() {
                return Err(Error::shape("scatter_rows", format!("bad position {p} of {n}")));
            }
            slot[p] = Some(i);
        }
        let (sv, fv) = (self.value(src), self.value(fill));
        let mut data = Vec::with_capacity(n * cols);
        for s in &slot {
            match s {
                Some(i) => data.extend_from_slice(sv.row(*i)),
                None => data.extend_from_slice(fv.data()),
            }
        }
        let out = Tensor::new(vec![n, cols], data)?;
        let op = Op::ScatterRows {
            src,
            fill,
            positions: positions.to_vec(),
        };
        self.push_op("scatter_rows", out, op, &[src, fill])
    }

    /// `[m, n] -> [1, n]` column means.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("mean_rows", x)?;
        if rows == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let xv = self.value(x);
        let inv = F::one() / F::lit(rows as f64);
        let mut data = vec![F::zero(); cols];
        for r in 0..rows {
            for (d, &v) in data.iter_mut().zip(xv.row(r)) {
                *d = *d + v;
            }
        }
        data.iter_mut().for_each(|d| *d = *d * inv);
        let out = Tensor::new(vec![1, cols], data)?;
        self.push_op("mean_rows", out, Op::MeanRows(x), &[x])
    }

    /// Flat gather into a tensor of `shape`.
    pub fn gather(&mut self, x: Var, index: &[usize], shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).numel();
        if index.iter().any(|&i| i >= n) {
            return Err(Error::shape("gather", format!("index out of range for {n} values")));
        }
        let src = self.value(x).data();
        let out = Tensor::new(shape, index.iter().map(|&i| src[i]).collect())?;
        let op = Op::Gather {
            x,
            index: index.to_vec(),
        };
        self.push_op("gather", out, op, &[x])
    }

    /// `Σ_{mask} |y − target| / alpha` as a scalar.
    pub fn masked_l1(&mut self, y: Var, target: &Tensor<F>, mask: &[bool], alpha: F) -> Result<Var> {
        let yv = self.value(y);
        if yv.shape() != target.shape() || mask.len() != yv.numel() {
            return Err(Error::shape(
                "masked_l1",
                format!("prediction {:?}, target {:?}", yv.shape(), target.shape()),
            ));
        }
        let sum = compensated_sum(
            yv.data()
                .iter()
                .zip(target.data())
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|((&p, &t), _)| (p - t).abs()),
        );
        let out = Tensor::scalar(sum / alpha);
        let op = Op::MaskedL1 {
            y,
            target: target.data().to_vec(),
            mask: mask.to_vec(),
            alpha,
        };
        self.push_op("masked_l1", out, op, &[y])
    }

    /// Mean over rows of softmax cross-entropy; `target` has the logits' shape.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &Tensor<F>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != target.shape() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?}, target {:?}", lv.shape(), target.shape()),
            ));
        }
        let (loss, probs) = soft_cross_entropy(lv.data(), target.data(), lv.cols());
        let op = Op::SoftCrossEntropy {
            logits,
            target: target.data().to_vec(),
            probs,
        };
        self.push_op("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    pub fn sum_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut total = F::zero();
        for &p in parts {
            let v = self.value(p);
            if v.numel() != 1 {
                return Err(Error::shape("sum_scalars", format!("{:?} is not a scalar", v.shape())));
            }
            total = total + v.data()[0];
        }
        self.push_op("sum_scalars", Tensor::scalar(total), Op::SumScalars(parts.to_vec()), parts)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            } else if let Some(g) = &grads[i] {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<'a, F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let val = |v: Var| -> &Tensor<F> { &self.nodes[v.0].value };
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); n.value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                acc(*a, &mut |ga| ops::matmul_bt_acc(g, bv.data(), ga, m, n, k));
                acc(*b, &mut |gb| ops::matmul_at_acc(av.data(), g, gb, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                acc(*a, &mut |ga| ops::matmul_acc(g, bv.data(), ga, m, n, k));
                acc(*b, &mut |gb| ops::matmul_at_acc(g, av.data(), gb, m, n, k));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |gx| add_into(gx, g));
                }
            }
            Op::AddRow(x, b) => {
                let cols = val(*b).numel();
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*b, &mut |gb| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| {
                for (d, &s) in gx.iter_mut().zip(g) {
                    *d = *d + s * *c;
                }
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let gam = val(*gamma).data();
                let cols = gam.len();
                acc(*beta, &mut |gb| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (row, xh) in g.chunks(cols).zip(cache.xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] = gg[c] + row[c] * xh[c];
                        }
                    }
                });
                let n = F::lit(cols as f64);
                acc(*x, &mut |gx| {
                    let rows = g.chunks(cols).zip(cache.xhat.chunks(cols));
                    for (r, (row, xh)) in rows.enumerate() {
                        let mut mean_d = F::zero();
                        let mut mean_dx = F::zero();
                        for c in 0..cols {
                            let d = row[c] * gam[c];
                            mean_d = mean_d + d;
                            mean_dx = mean_dx + d * xh[c];
                        }
                        mean_d = mean_d / n;
                        mean_dx = mean_dx / n;
                        let rs = cache.rstd[r];
                        for c in 0..cols {
                            let d = row[c] * gam[c];
                            let o = r * cols + c;
                            gx[o] = gx[o] + rs * (d - mean_d - xh[c] * mean_dx);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |gx| {
                    for ((d, &s), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *d = *d + s * ops::gelu_grad_scalar(xi);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let cols = node.value.cols();
                acc(*x, &mut |gx| {
                    for ((gr, yr), dst) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let dot = gr.iter().zip(yr).fold(F::zero(), |s, (&a, &b)| s + a * b);
                        for c in 0..cols {
                            dst[c] = dst[c] + yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let cols = val(*x).cols();
                let width = node.value.cols();
                acc(*x, &mut |gx| {
                    for (r, row) in g.chunks(width).enumerate() {
                        add_into(&mut gx[r * cols + start..r * cols + start + width], row);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &mut |gp| {
                        for (r, dst) in gp.chunks_mut(w).enumerate() {
                            add_into(dst, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::GatherRows { x, rows } => {
                let cols = node.value.cols();
                acc(*x, &mut |gx| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * cols..(r + 1) * cols], &g[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::ScatterRows {
                src,
                fill,
                positions,
            } => {
                let cols = node.value.cols();
                let n = node.value.rows();
                let mut taken = vec![false; n];
                for &p in positions {
                    taken[p] = true;
                }
                acc(*src, &mut |gs| {
                    for (i, &p) in positions.iter().enumerate() {
                        add_into(&mut gs[i * cols..(i + 1) * cols], &g[p * cols..(p + 1) * cols]);
                    }
                });
                acc(*fill, &mut |gf| {
                    for (r, &t) in taken.iter().enumerate() {
                        if !t {
                            add_into(gf, &g[r * cols..(r + 1) * cols]);
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let rows = val(*x).rows();
                let inv = F::one() / F::lit(rows as f64);
                acc(*x, &mut |gx| {
                    for dst in gx.chunks_mut(g.len()) {
                        for (d, &s) in dst.iter_mut().zip(g) {
                            *d = *d + s * inv;
                        }
                    }
                });
            }
            Op::Gather { x, index } => acc(*x, &mut |gx| {
                for (&i, &s) in index.iter().zip(g) {
                    gx[i] = gx[i] + s;
                }
            }),
            Op::MaskedL1 {
                y,
                target,
                mask,
                alpha,
            } => {
                let yv = val(*y).data();
                let scale = g[0] / *alpha;
                acc(*y, &mut |gy| {
                    for i in 0..yv.len() {
                        if mask[i] {
                            let diff = yv[i] - target[i];
                            // Subgradient of |·| at 0 is taken as 0.
                            if diff > F::zero() {
                                gy[i] = gy[i] + scale;
                            } else if diff < F::zero() {
                                gy[i] = gy[i] - scale;
                            }
                        }
                    }
                });
            }
            Op::SoftCrossEntropy {
                logits,
                target,
                probs,
            } => {
                let cols = val(*logits).cols();
                let rows = probs.len() / cols;
                let scale = g[0] / F::lit(rows as f64);
                acc(*logits, &mut |gl| {
                    for r in 0..rows {
                        let t = &target[r * cols..(r + 1) * cols];
                        let mass: F = t.iter().copied().sum();
                        for c in 0..cols {
                            let o = r * cols + c;
                            gl[o] = gl[o] + scale * (probs[o] * mass - t[c]);
                        }
                    }
                });
            }
            Op::SumScalars(parts) => {
                for &p in parts {
                    acc(p, &mut |gp| gp[0] = gp[0] + g[0]);
                }
            }
        }
    }
}

/// Neumaier-compensated sum. Long reductions feeding a scalar loss would
/// otherwise carry roundoff large enough to swamp central differences of
/// small gradients.
pub(crate) fn compensated_sum<F: Real>(values: impl Iterator<Item = F>) -> F {
    let mut sum = F::zero();
    let mut comp = F::zero();
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp = comp + ((sum - t) + v);
        } else {
            comp = comp + ((v - t) + sum);
        }
        sum = t;
    }
    sum + comp
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of a leaf, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
