//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! valid topological order, so [`Graph::backward`] is a single reverse sweep
//! visiting each node once. Nodes are addressed by the copyable handle
//! [`Var`]. A graph is owned and mutated by one thread.

use crate::kernels;
use crate::tensor::{invalid, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        inner: usize,
        axis_len: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    Unfold1d { x: Var, k: usize },
    Fold1d { y: Var, k: usize },
    Frames { x: Var, width: usize },
    Pad2d { x: Var, pads: [usize; 4] },
    AdaptivePool { x: Var },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedFill { x: Var, fill: Vec<bool> },
    Sum(Var),
    WindowAggregate { weights: Var, values: Var, k: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Elementwise binary kinds accepted by [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn add_into(acc: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match acc {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
        None => *acc = Some(delta),
    }
}

/// Rows and trailing width of a tensor viewed as a matrix over its last axis.
fn rows_cols(t: &Tensor) -> (usize, usize) {
    let cols = *t.shape().last().unwrap_or(&1);
    (t.len() / cols, cols)
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(invalid(op, format!("expected rank {rank}, got shape {:?}", t.shape())));
    }
    Ok(())
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

    /// Adds an input tensor; it is differentiated iff `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = value.requires_grad();
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Adds a non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Clears every accumulated leaf gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn emit(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        check_finite(name, &data)?;
        let value = Tensor::new(shape, data)?;
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    // ---- elementwise -------------------------------------------------

    /// `a ∘ b` where `b` has the shape of `a` or of a trailing suffix of it.
    pub fn elementwise(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let sa = ta.shape();
        let sb = tb.shape();
        let (name, f): (&'static str, fn(f64, f64) -> f64) = match kind {
            BinaryKind::Add => ("add", |x, y| x + y),
            BinaryKind::Sub => ("sub", |x, y| x - y),
            BinaryKind::Mul => ("mul", |x, y| x * y),
        };
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch(name, ta, tb));
        }
        let bl = tb.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % bl]))
            .collect();
        let shape = sa.to_vec();
        let op = match kind {
            BinaryKind::Add => Op::Add(a, b),
            BinaryKind::Sub => Op::Sub(a, b),
            BinaryKind::Mul => Op::Mul(a, b),
        };
        self.emit(name, shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * s).collect();
        let shape = t.shape().to_vec();
        self.emit("scale", shape, data, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x + s).collect();
        let shape = t.shape().to_vec();
        self.emit("add_scalar", shape, data, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x.max(0.0)).collect();
        let shape = t.shape().to_vec();
        self.emit("relu", shape, data, Op::Relu(a), &[a])
    }

    /// Replaces positions where `fill` is true with `value`; those positions
    /// pass no gradient.
    pub fn masked_fill(&mut self, a: Var, fill: &[bool], value: f64) -> Result<Var> {
        let t = self.value(a);
        if fill.len() != t.len() {
            return Err(invalid(
                "masked_fill",
                format!("mask of length {} for shape {:?}", fill.len(), t.shape()),
            ));
        }
        let data = t
            .data()
            .iter()
            .zip(fill)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let shape = t.shape().to_vec();
        self.emit(
            "masked_fill",
            shape,
            data,
            Op::MaskedFill {
                x: a,
                fill: fill.to_vec(),
            },
            &[a],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.emit("sum", Vec::new(), vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    // ---- linear algebra ----------------------------------------------

    /// `a[..×k] · b[k×n]`; leading axes of `a` are treated as a batch of rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() < 2 || tb.rank() != 2 || ta.shape()[ta.rank() - 1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k) = rows_cols(ta);
        let n = tb.shape()[1];
        let data = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.emit("matmul", shape, data, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        expect_rank("transpose", t, 2)?;
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let data = kernels::transpose(t.data(), r, c);
        self.emit("transpose", vec![c, r], data, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: t.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = t.data().to_vec();
        self.emit("reshape", shape.to_vec(), data, Op::Reshape(a), &[a])
    }

    // ---- normalisation -----------------------------------------------

    /// Softmax along `axis`, numerically stabilised by max subtraction.
    ///
    /// `mask` marks positions that may receive weight. It either covers the
    /// whole tensor or a trailing suffix of its shape (broadcast over the
    /// leading axes). Masked positions get exactly zero weight and zero grad.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(invalid("softmax", format!("axis {axis} for shape {:?}", t.shape())));
        }
        if let Some(m) = mask {
            let suffix_ok = (0..=t.rank())
                .any(|s| t.shape()[s..].iter().product::<usize>() == m.len());
            if !suffix_ok {
                return Err(invalid(
                    "softmax",
                    format!("mask of length {} does not broadcast to {:?}", m.len(), t.shape()),
                ));
            }
        }
        let axis_len = t.shape()[axis];
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let outer = t.len() / (axis_len * inner);
        let src = t.data();
        let allowed = |idx: usize| mask.is_none_or(|m| m[idx % m.len()]);
        let mut out = vec![0.0; t.len()];
        for o in 0..outer {
            for c in 0..inner {
                let base = o * axis_len * inner + c;
                let idx = |r: usize| base + r * inner;
                let max = (0..axis_len)
                    .filter(|&r| allowed(idx(r)))
                    .map(|r| src[idx(r)])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(TensorError::DegenerateSoftmax {
                        slice: o * inner + c,
                    });
                }
                let mut total = 0.0;
                for r in 0..axis_len {
                    if allowed(idx(r)) {
                        let e = (src[idx(r)] - max).exp();
                        out[idx(r)] = e;
                        total += e;
                    }
                }
                for r in 0..axis_len {
                    out[idx(r)] /= total;
                }
            }
        }
        let shape = t.shape().to_vec();
        self.emit("softmax", shape, out, Op::Softmax { x, inner, axis_len }, &[x])
    }

    /// Summed negative log-likelihood of `targets` under a row-wise softmax
    /// of `logits[N×C]`. Rows whose target is `None` are skipped. `allowed`
    /// (length `N·C` or `C`) excludes classes from the normaliser.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        allowed: Option<&[bool]>,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = rows_cols(t);
        if targets.len() != rows {
            return Err(invalid(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        if let Some(m) = allowed {
            if m.len() != rows * cols && m.len() != cols {
                return Err(invalid("cross_entropy", "mask length"));
            }
        }
        let ok = |i: usize| allowed.is_none_or(|m| m[i % m.len()]);
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let Some(target) = *target else { continue };
            if target >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: target,
                    size: cols,
                });
            }
            if !ok(r * cols + target) {
                return Err(invalid("cross_entropy", format!("target {target} is masked")));
            }
            let row = &t.data()[r * cols..(r + 1) * cols];
            let max = (0..cols)
                .filter(|&c| ok(r * cols + c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..cols {
                if ok(r * cols + c) {
                    let e = (row[c] - max).exp();
                    probs[r * cols + c] = e;
                    total += e;
                }
            }
            probs[r * cols..(r + 1) * cols]
                .iter_mut()
                .for_each(|p| *p /= total);
            loss += -(row[target] - max - total.ln());
        }
        self.emit(
            "cross_entropy",
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Layer normalisation over the last axis with learned `gain`/`shift`
    /// (both `[F]`); variance uses `1/F`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(invalid("layer_norm", "epsilon must be positive"));
        }
        let t = self.value(x);
        let (rows, f) = rows_cols(t);
        let (tg, ts) = (self.value(gain), self.value(shift));
        if tg.shape() != [f] {
            return Err(mismatch("layer_norm", t, tg));
        }
        if ts.shape() != [f] {
            return Err(mismatch("layer_norm", t, ts));
        }
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = &t.data()[r * f..(r + 1) * f];
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..f {
                let h = (row[c] - mean) * is;
                xhat[r * f + c] = h;
                out[r * f + c] = h * tg.data()[c] + ts.data()[c];
            }
        }
        let shape = t.shape().to_vec();
        self.emit(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
            &[x, gain, shift],
        )
    }

    // ---- windows and pooling -----------------------------------------

    /// Centered windows: `[L×F] -> [L×K×F]`, out-of-range rows zero. `K` odd.
    pub fn unfold1d(&mut self, x: Var, k: usize) -> Result<Var> {
        check_window(k)?;
        let t = self.value(x);
        expect_rank("unfold1d", t, 2)?;
        let (l, f) = (t.shape()[0], t.shape()[1]);
        let data = kernels::unfold1d(t.data(), l, f, k);
        self.emit("unfold1d", vec![l, k, f], data, Op::Unfold1d { x, k }, &[x])
    }

    /// Sum of window rows back onto sequence positions: `[L×K×F] -> [L×F]`.
    pub fn fold1d(&mut self, y: Var) -> Result<Var> {
        let t = self.value(y);
        expect_rank("fold1d", t, 3)?;
        let (l, k, f) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        check_window(k)?;
        let data = kernels::fold1d(t.data(), l, f, k);
        self.emit("fold1d", vec![l, f], data, Op::Fold1d { y, k }, &[y])
    }

    /// Valid-mode windows of `width` consecutive rows: `[N×C] -> [N-w+1, w, C]`.
    pub fn frames(&mut self, x: Var, width: usize) -> Result<Var> {
        let t = self.value(x);
        expect_rank("frames", t, 2)?;
        let (n, c) = (t.shape()[0], t.shape()[1]);
        if width == 0 || width > n {
            return Err(invalid("frames", format!("width {width} for {n} rows")));
        }
        let data = kernels::frames(t.data(), n, c, width);
        self.emit(
            "frames",
            vec![n + 1 - width, width, c],
            data,
            Op::Frames { x, width },
            &[x],
        )
    }

    /// Zero-pads a matrix: `[top, bottom, left, right]`.
    pub fn pad2d(&mut self, x: Var, pads: [usize; 4]) -> Result<Var> {
        let t = self.value(x);
        expect_rank("pad2d", t, 2)?;
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let [top, bottom, left, right] = pads;
        let (nr, nc) = (r + top + bottom, c + left + right);
        let mut data = vec![0.0; nr * nc];
        for i in 0..r {
            let dst = (i + top) * nc + left;
            data[dst..dst + c].copy_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        self.emit("pad2d", vec![nr, nc], data, Op::Pad2d { x, pads }, &[x])
    }

    /// Average pooling of `[Lin×F]` to `[Lout×F]` with proportional bins.
    pub fn adaptive_avg_pool1d(&mut self, x: Var, len_out: usize) -> Result<Var> {
        let t = self.value(x);
        expect_rank("adaptive_avg_pool1d", t, 2)?;
        if len_out == 0 {
            return Err(invalid("adaptive_avg_pool1d", "target length must be positive"));
        }
        let (l, f) = (t.shape()[0], t.shape()[1]);
        let data = kernels::adaptive_avg_pool1d(t.data(), l, f, len_out);
        self.emit(
            "adaptive_avg_pool1d",
            vec![len_out, f],
            data,
            Op::AdaptivePool { x },
            &[x],
        )
    }

    /// Outlook aggregation inside each window:
    /// `out[i,j,f] = Σ_r weights[i,j,r,f] · values[i,r,f]`.
    pub fn window_aggregate(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (tw, tv) = (self.value(weights), self.value(values));
        expect_rank("window_aggregate", tw, 4)?;
        expect_rank("window_aggregate", tv, 3)?;
        let (l, k, f) = (tv.shape()[0], tv.shape()[1], tv.shape()[2]);
        if tw.shape() != [l, k, k, f] {
            return Err(mismatch("window_aggregate", tw, tv));
        }
        let (w, v) = (tw.data(), tv.data());
        let mut out = vec![0.0; l * k * f];
        for i in 0..l {
            for j in 0..k {
                let dst = &mut out[(i * k + j) * f..(i * k + j + 1) * f];
                for r in 0..k {
                    let wrow = &w[((i * k + j) * k + r) * f..][..f];
                    let vrow = &v[(i * k + r) * f..][..f];
                    for c in 0..f {
                        dst[c] += wrow[c] * vrow[c];
                    }
                }
            }
        }
        self.emit(
            "window_aggregate",
            vec![l, k, f],
            out,
            Op::WindowAggregate { weights, values, k },
            &[weights, values],
        )
    }

    // ---- indexing ----------------------------------------------------

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat_cols", "no inputs"))?;
        let rows = self.value(*first).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            expect_rank("concat_cols", t, 2)?;
            if t.shape()[0] != rows {
                return Err(mismatch("concat_cols", self.value(*first), t));
            }
            widths.push(t.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.emit(
            "concat_cols",
            vec![rows, total],
            data,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        expect_rank("slice_cols", t, 2)?;
        let (r, c) = (t.shape()[0], t.shape()[1]);
        if start >= end || end > c {
            return Err(invalid("slice_cols", format!("[{start},{end}) of {c} columns")));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + end]);
        }
        self.emit(
            "slice_cols",
            vec![r, end - start],
            data,
            Op::SliceCols { x, start },
            &[x],
        )
    }

    /// Rows `[start, end)` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 || start >= end || end > t.shape()[0] {
            return Err(invalid("slice_rows", format!("[{start},{end}) of {:?}", t.shape())));
        }
        let width = t.len() / t.shape()[0];
        let data = t.data()[start * width..end * width].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = end - start;
        self.emit("slice_rows", shape, data, Op::SliceRows { x, start }, &[x])
    }

    /// Row lookup `table[ids]`: `[V×H] -> [n×H]`. Gradients scatter-add.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        expect_rank("gather", t, 2)?;
        let (v, h) = (t.shape()[0], t.shape()[1]);
        if ids.is_empty() {
            return Err(invalid("gather", "no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    size: v,
                });
            }
            data.extend_from_slice(&t.data()[id * h..(id + 1) * h]);
        }
        self.emit(
            "gather",
            vec![ids.len(), h],
            data,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    // ---- reverse sweep -----------------------------------------------

    /// Accumulates `d root / d leaf` into every leaf that requires grad.
    ///
    /// Repeated calls without [`Graph::zero_grad`] add to existing gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rt = self.value(root);
        if rt.len() != 1 {
            return Err(TensorError::NonScalarRoot(rt.shape().to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].value.accumulate_grad(&dy)?;
                continue;
            }
            for (input, delta) in self.input_grads(idx, &dy) {
                if self.nodes[input.0].requires_grad {
                    add_into(&mut grads[input.0], delta);
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, idx: usize, dy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.value(v);
        let out = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, dy.to_vec()), (*b, reduce_broadcast(dy, val(*b).len()))],
            Op::Sub(a, b) => {
                let neg: Vec<f64> = dy.iter().map(|g| -g).collect();
                vec![(*a, dy.to_vec()), (*b, reduce_broadcast(&neg, val(*b).len()))]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let bl = tb.len();
                let da = dy
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * tb.data()[i % bl])
                    .collect();
                let prod: Vec<f64> = dy.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                vec![(*a, da), (*b, reduce_broadcast(&prod, bl))]
            }
            Op::Scale(a, s) => vec![(*a, dy.iter().map(|g| g * s).collect())],
            Op::AddScalar(a) => vec![(*a, dy.to_vec())],
            Op::Relu(a) => {
                let d = dy
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*a, d)]
            }
            Op::MaskedFill { x, fill } => {
                let d = dy
                    .iter()
                    .zip(fill)
                    .map(|(g, &m)| if m { 0.0 } else { *g })
                    .collect();
                vec![(*x, d)]
            }
            Op::Sum(a) => vec![(*a, vec![dy[0]; val(*a).len()])],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = rows_cols(ta);
                let n = tb.shape()[1];
                let da = kernels::matmul_nt(dy, tb.data(), m, n, k);
                let db = kernels::matmul_tn(ta.data(), dy, m, k, n);
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                vec![(*a, kernels::transpose(dy, r, c))]
            }
            Op::Reshape(a) => vec![(*a, dy.to_vec())],
            Op::Softmax { x, inner, axis_len } => {
                let y = out.data();
                let (inner, axis_len) = (*inner, *axis_len);
                let outer = y.len() / (inner * axis_len);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let base = o * axis_len * inner + c;
                        let dot: f64 = (0..axis_len)
                            .map(|r| y[base + r * inner] * dy[base + r * inner])
                            .sum();
                        for r in 0..axis_len {
                            let p = base + r * inner;
                            dx[p] = y[p] * (dy[p] - dot);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let cols = probs.len() / targets.len();
                let mut d = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for c in 0..cols {
                        d[r * cols + c] = dy[0] * probs[r * cols + c];
                    }
                    d[r * cols + t] -= dy[0];
                }
                vec![(*logits, d)]
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let f = val(*gain).len();
                let g = val(*gain).data();
                let rows = xhat.len() / f;
                let mut dx = vec![0.0; xhat.len()];
                let mut dgain = vec![0.0; f];
                let mut dshift = vec![0.0; f];
                for r in 0..rows {
                    let dyr = &dy[r * f..(r + 1) * f];
                    let xh = &xhat[r * f..(r + 1) * f];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for c in 0..f {
                        dgain[c] += dyr[c] * xh[c];
                        dshift[c] += dyr[c];
                        let dxh = dyr[c] * g[c];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[c];
                    }
                    let scale = inv_std[r] / f as f64;
                    for c in 0..f {
                        let dxh = dyr[c] * g[c];
                        dx[r * f + c] = scale * (f as f64 * dxh - sum_dxh - xh[c] * sum_dxh_xh);
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*shift, dshift)]
            }
            Op::Unfold1d { x, k } => {
                let (l, f) = (val(*x).shape()[0], val(*x).shape()[1]);
                vec![(*x, kernels::fold1d(dy, l, f, *k))]
            }
            Op::Fold1d { y, k } => {
                let (l, f) = (out.shape()[0], out.shape()[1]);
                vec![(*y, kernels::unfold1d(dy, l, f, *k))]
            }
            Op::Frames { x, width } => {
                let (n, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                vec![(*x, kernels::frames_adjoint(dy, n, c, *width))]
            }
            Op::Pad2d { x, pads } => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let nc = out.shape()[1];
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let src = (i + pads[0]) * nc + pads[2];
                    d.extend_from_slice(&dy[src..src + c]);
                }
                vec![(*x, d)]
            }
            Op::AdaptivePool { x } => {
                let (l, f) = (val(*x).shape()[0], val(*x).shape()[1]);
                let lo = out.shape()[0];
                vec![(*x, kernels::adaptive_avg_pool1d_adjoint(dy, l, f, lo))]
            }
            Op::WindowAggregate { weights, values, k } => {
                let (w, v) = (val(*weights).data(), val(*values).data());
                let k = *k;
                let l = out.shape()[0];
                let f = out.shape()[2];
                let mut dw = vec![0.0; w.len()];
                let mut dv = vec![0.0; v.len()];
                for i in 0..l {
                    for j in 0..k {
                        let g = &dy[(i * k + j) * f..][..f];
                        for r in 0..k {
                            let wo = ((i * k + j) * k + r) * f;
                            let vo = (i * k + r) * f;
                            for c in 0..f {
                                dw[wo + c] = g[c] * v[vo + c];
                                dv[vo + c] += g[c] * w[wo + c];
                            }
                        }
                    }
                }
                vec![(*weights, dw), (*values, dv)]
            }
            Op::ConcatCols(parts) => {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let w = val(p).shape()[1];
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&dy[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                        (p, d)
                    })
                    .collect()
            }
            Op::SliceCols { x, start } => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let w = out.shape()[1];
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + w].copy_from_slice(&dy[i * w..(i + 1) * w]);
                }
                vec![(*x, d)]
            }
            Op::SliceRows { x, start } => {
                let t = val(*x);
                let width = t.len() / t.shape()[0];
                let mut d = vec![0.0; t.len()];
                d[start * width..start * width + dy.len()].copy_from_slice(dy);
                vec![(*x, d)]
            }
            Op::Gather { table, ids } => {
                let t = val(*table);
                let h = t.shape()[1];
                let mut d = vec![0.0; t.len()];
                for (n, &id) in ids.iter().enumerate() {
                    for c in 0..h {
                        d[id * h + c] += dy[n * h + c];
                    }
                }
                vec![(*table, d)]
            }
        }
    }
}

fn check_window(k: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(invalid("unfold1d", format!("window size must be odd, got {k}")));
    }
    Ok(())
}

/// Sums a gradient over the leading axes a suffix-broadcast operand was
/// repeated along.
fn reduce_broadcast(d: &[f64], len: usize) -> Vec<f64> {
    if d.len() == len {
        return d.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in d.chunks(len) {
        out.iter_mut().zip(chunk).for_each(|(o, g)| *o += g);
    }
    out
}
