//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends one node to the tape. Nodes are stored in
//! creation order, so the tape is always topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.

use super::tensor::{gemm, Tensor};
use super::TensorError;

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous block of rows treated as one sequence by
/// [`Tape::attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    GatherRows { src: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    Pick { src: Var, idx: Vec<usize> },
    RmsNorm { src: Var, inv_rms: Vec<f64> },
    L2Normalize { src: Var, inv_norm: Vec<f64> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        segments: Vec<Segment>,
        probs: Vec<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. `v`, zeros when `v` is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

const RMS_EPS: f64 = 1e-6;
const L2_EPS: f64 = 1e-12;

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::Scale(a, c), a, |x| x * c)
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        row: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.len() != ta.cols() {
            return Err(mismatch(name, ta, tr));
        }
        let cols = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tr.data()[i % cols]))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, op, rg))
    }

    /// `a + row` with `row` (length `cols(a)`) broadcast over every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, Op::AddRow(a, row), |x, y| x + y)
    }

    /// `a ⊙ row` with `row` broadcast over every row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, Op::MulRow(a, row), |x, y| x * y)
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        if tc.len() != ta.rows() {
            return Err(mismatch("mul_col", ta, tc));
        }
        let cols = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * tc.data()[i / cols])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, col]);
        Ok(self.push(value, Op::MulCol(a, col), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (kb, n) = if trans_b {
            (tb.cols(), tb.rows())
        } else {
            (tb.rows(), tb.cols())
        };
        if k != kb || tb.rank() > 2 || ta.rank() > 2 {
            return Err(mismatch(if trans_b { "matmul_nt" } else { "matmul" }, ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), trans_b, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Softmax along each row, computed with max-subtraction.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = Tensor::zeros(ta.shape());
        for r in 0..ta.rows() {
            softmax_row(ta.row(r), out.row_mut(r));
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Row softmax restricted to entries where `keep` is true; the others
    /// come out as exactly zero. `keep` has one flag per element of `a`.
    pub fn masked_row_softmax(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let ta = self.value(a);
        if keep.len() != ta.len() {
            return Err(TensorError::Invalid(format!(
                "softmax mask has {} entries for shape {:?}",
                keep.len(),
                ta.shape()
            )));
        }
        let cols = ta.cols();
        let mut out = Tensor::zeros(ta.shape());
        for r in 0..ta.rows() {
            let row = ta.row(r);
            let k = &keep[r * cols..(r + 1) * cols];
            if !k.iter().any(|&b| b) {
                return Err(TensorError::Invalid(format!("softmax row {r} fully masked")));
            }
            let max = row
                .iter()
                .zip(k)
                .filter(|(_, &b)| b)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let dst = out.row_mut(r);
            let mut total = 0.0;
            for j in 0..cols {
                if k[j] {
                    dst[j] = (row[j] - max).exp();
                    total += dst[j];
                }
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let rg = self.rg(&[a]);
        // Excluded entries have probability 0, so the softmax backward rule
        // already gives them zero gradient.
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = Tensor::zeros(ta.shape());
        for r in 0..ta.rows() {
            let row = ta.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for (d, &s) in out.row_mut(r).iter_mut().zip(row) {
                *d = s - lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Op::Log(a), a, f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Op::Tanh(a), a, f64::tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Op::Gelu(a), a, gelu)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean over rows: `m × n` → `1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(1, c, out), Op::MeanRows(a), rg)
    }

    /// Mean negative log-likelihood of `targets[i]` under row `i` of
    /// `logits`, over rows where `mask[i]` is set.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = (t.rows(), t.cols());
        if targets.len() != rows || mask.len() != rows {
            return Err(TensorError::Invalid(format!(
                "cross-entropy: {} targets / {} mask flags for {rows} rows",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyMask);
        }
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let tgt = targets[r];
            if tgt >= cols {
                return Err(TensorError::Index {
                    op: "masked_cross_entropy",
                    index: tgt,
                    len: cols,
                });
            }
            let row = t.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[tgt];
            softmax_row(row, &mut probs[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Row gather; indices may repeat.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(src);
        let (rows, cols) = (t.rows(), t.cols());
        if idx.is_empty() {
            return Err(TensorError::Invalid("gather_rows with no indices".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor::matrix(idx.len(), cols, out),
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(src, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_rows of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(mismatch("concat_rows", self.value(*first), t));
            }
            out.extend_from_slice(t.data());
            rows += t.rows();
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(rows, cols, out),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Picks element `idx[i]` from row `i`; result has shape `[rows]`.
    pub fn pick(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(src);
        if idx.len() != t.rows() {
            return Err(TensorError::Invalid(format!(
                "pick: {} indices for {} rows",
                idx.len(),
                t.rows()
            )));
        }
        let mut out = Vec::with_capacity(idx.len());
        for (r, &c) in idx.iter().enumerate() {
            if c >= t.cols() {
                return Err(TensorError::Index {
                    op: "pick",
                    index: c,
                    len: t.cols(),
                });
            }
            out.push(t.at(r, c));
        }
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor::vector(out),
            Op::Pick {
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// `x / sqrt(mean(x²) + eps)` along each row.
    pub fn rms_norm(&mut self, src: Var) -> Var {
        let t = self.value(src);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(t.shape());
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = t.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for (d, &s) in out.row_mut(r).iter_mut().zip(row) {
                *d = s * inv;
            }
        }
        let rg = self.rg(&[src]);
        self.push(out, Op::RmsNorm { src, inv_rms }, rg)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, src: Var) -> Var {
        let t = self.value(src);
        let rows = t.rows();
        let mut out = Tensor::zeros(t.shape());
        let mut inv_norm = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = t.row(r);
            let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() + L2_EPS).sqrt();
            inv_norm.push(inv);
            for (d, &s) in out.row_mut(r).iter_mut().zip(row) {
                *d = s * inv;
            }
        }
        let rg = self.rg(&[src]);
        self.push(out, Op::L2Normalize { src, inv_norm }, rg)
    }

    /// Multi-head scaled dot-product attention, independently within each
    /// segment of rows. `q`, `k`, `v` are `T × D` with `D` divisible by
    /// `heads`; segments must tile `0..T` in order.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        segments: &[Segment],
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(mismatch("attention", tq, tk));
        }
        let (rows, d) = (tq.rows(), tq.cols());
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "attention width {d} not divisible by {heads} heads"
            )));
        }
        let mut cursor = 0;
        for s in segments {
            if s.start != cursor || s.len == 0 {
                return Err(TensorError::Invalid("attention segments must tile rows".into()));
            }
            cursor += s.len;
        }
        if cursor != rows {
            return Err(TensorError::Invalid(format!(
                "attention segments cover {cursor} of {rows} rows"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![0.0; rows * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        let mut scores = Vec::new();
        for s in segments {
            let n = s.len;
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0; n * n];
                for i in 0..n {
                    let qi = &qd[(s.start + i) * d + off..(s.start + i) * d + off + dh];
                    let upto = if causal { i + 1 } else { n };
                    scores.clear();
                    for j in 0..upto {
                        let kj = &kd[(s.start + j) * d + off..(s.start + j) * d + off + dh];
                        scores.push(dot(qi, kj) * scale);
                    }
                    softmax_row(&scores, &mut p[i * n..i * n + upto]);
                    let oi = &mut out[(s.start + i) * d + off..(s.start + i) * d + off + dh];
                    for j in 0..upto {
                        let pij = p[i * n + j];
                        let vj = &vd[(s.start + j) * d + off..(s.start + j) * d + off + dh];
                        for (o, &x) in oi.iter_mut().zip(vj) {
                            *o += pij * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::matrix(rows, d, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(lt.shape()));
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape();
                *slot = Some(if g.shape() == shape {
                    g
                } else {
                    g.reshaped(shape).expect("gradient size matches value")
                });
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.acc(grads, *a, zip(g, tb, |x, y| x * y));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, zip(g, ta, |x, y| x * y));
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.map(|x| x * c)),
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.wants(*row) {
                    let cols = g.cols();
                    let mut gr = vec![0.0; cols];
                    for (i, &x) in g.data().iter().enumerate() {
                        gr[i % cols] += x;
                    }
                    self.acc(grads, *row, Tensor::vector(gr));
                }
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (self.value(*a), self.value(*row));
                let cols = g.cols();
                if self.wants(*a) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * tr.data()[i % cols])
                        .collect();
                    self.acc(grads, *a, Tensor::new(g.shape().to_vec(), data).unwrap());
                }
                if self.wants(*row) {
                    let mut gr = vec![0.0; cols];
                    for (i, (&x, &y)) in g.data().iter().zip(ta.data()).enumerate() {
                        gr[i % cols] += x * y;
                    }
                    self.acc(grads, *row, Tensor::vector(gr));
                }
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (self.value(*a), self.value(*col));
                let cols = g.cols();
                if self.wants(*a) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * tc.data()[i / cols])
                        .collect();
                    self.acc(grads, *a, Tensor::new(g.shape().to_vec(), data).unwrap());
                }
                if self.wants(*col) {
                    let mut gc = vec![0.0; tc.len()];
                    for (i, (&x, &y)) in g.data().iter().zip(ta.data()).enumerate() {
                        gc[i / cols] += x * y;
                    }
                    self.acc(grads, *col, Tensor::vector(gc));
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = g.cols();
                if self.wants(*a) {
                    // dA = G · B   (b stored n×k)   or   G · Bᵀ (b stored k×n)
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), !trans_b, &mut ga, 0.0);
                    self.acc(grads, *a, Tensor::matrix(m, k, ga));
                }
                if self.wants(*b) {
                    if *trans_b {
                        // dB (n×k) = Gᵀ · A
                        let mut gb = vec![0.0; n * k];
                        gemm(n, m, k, g.data(), true, ta.data(), false, &mut gb, 0.0);
                        self.acc(grads, *b, Tensor::matrix(n, k, gb));
                    } else {
                        // dB (k×n) = Aᵀ · G
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, 0.0);
                        self.acc(grads, *b, Tensor::matrix(k, n, gb));
                    }
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, g.clone().reshaped(&shape).unwrap());
            }
            Op::Softmax(a) => {
                let mut ga = Tensor::zeros(out.shape());
                for r in 0..out.rows() {
                    let (p, gr) = (out.row(r), g.row(r));
                    let inner = dot(p, gr);
                    for ((d, &pi), &gi) in ga.row_mut(r).iter_mut().zip(p).zip(gr) {
                        *d = pi * (gi - inner);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let mut ga = Tensor::zeros(out.shape());
                for r in 0..out.rows() {
                    let (ls, gr) = (out.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    for ((d, &l), &gi) in ga.row_mut(r).iter_mut().zip(ls).zip(gr) {
                        *d = gi - l.exp() * total;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Exp(a) => self.acc(grads, *a, zip(g, out, |x, y| x * y)),
            Op::Log(a) => self.acc(grads, *a, zip(g, self.value(*a), |x, y| x / y)),
            Op::Tanh(a) => self.acc(grads, *a, zip(g, out, |x, y| x * (1.0 - y * y))),
            Op::Gelu(a) => self.acc(grads, *a, zip(g, self.value(*a), |x, y| x * gelu_grad(y))),
            Op::Sum(a) => {
                let shape = self.value(*a).shape();
                self.acc(grads, *a, Tensor::filled(shape, g.item()));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                self.acc(grads, *a, Tensor::filled(t.shape(), g.item() / t.len() as f64));
            }
            Op::MeanRows(a) => {
                let t = self.value(*a);
                let (r, c) = (t.rows(), t.cols());
                let mut ga = Tensor::zeros(t.shape());
                for i in 0..r {
                    for (d, &x) in ga.row_mut(i).iter_mut().zip(g.data()) {
                        *d = x / r as f64;
                    }
                }
                debug_assert_eq!(g.len(), c);
                self.acc(grads, *a, ga);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let t = self.value(*logits);
                let cols = t.cols();
                let scale = g.item() / *count as f64;
                let mut gl = vec![0.0; t.len()];
                for r in 0..t.rows() {
                    if !mask[r] {
                        continue;
                    }
                    for c in 0..cols {
                        gl[r * cols + c] = probs[r * cols + c] * scale;
                    }
                    gl[r * cols + targets[r]] -= scale;
                }
                self.acc(grads, *logits, Tensor::new(t.shape().to_vec(), gl).unwrap());
            }
            Op::GatherRows { src, idx } => {
                if self.wants(*src) {
                    let t = self.value(*src);
                    let mut gs = Tensor::zeros(t.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, &x) in gs.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    self.acc(grads, *src, gs);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let n = t.len();
                    if self.wants(p) {
                        let slice = g.data()[offset..offset + n].to_vec();
                        self.acc(grads, p, Tensor::new(t.shape().to_vec(), slice).unwrap());
                    }
                    offset += n;
                }
            }
            Op::Pick { src, idx } => {
                let t = self.value(*src);
                let mut gs = Tensor::zeros(t.shape());
                let cols = t.cols();
                for (r, &c) in idx.iter().enumerate() {
                    gs.data_mut()[r * cols + c] += g.data()[r];
                }
                self.acc(grads, *src, gs);
            }
            Op::RmsNorm { src, inv_rms } => {
                let t = self.value(*src);
                let cols = t.cols() as f64;
                let mut gs = Tensor::zeros(t.shape());
                for r in 0..t.rows() {
                    let (x, gr, inv) = (t.row(r), g.row(r), inv_rms[r]);
                    let gx = dot(gr, x);
                    let k = inv * inv * inv * gx / cols;
                    for ((d, &xi), &gi) in gs.row_mut(r).iter_mut().zip(x).zip(gr) {
                        *d = gi * inv - xi * k;
                    }
                }
                self.acc(grads, *src, gs);
            }
            Op::L2Normalize { src, inv_norm } => {
                let t = self.value(*src);
                let mut gs = Tensor::zeros(t.shape());
                for r in 0..t.rows() {
                    let (y, gr, inv) = (out.row(r), g.row(r), inv_norm[r]);
                    let gy = dot(gr, y);
                    for ((d, &yi), &gi) in gs.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *d = inv * (gi - yi * gy);
                    }
                }
                self.acc(grads, *src, gs);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                segments,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *heads, *causal, segments, probs, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        segments: &[Segment],
        probs: &[Vec<f64>],
        grads: &mut [Option<Tensor>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = (tq.rows(), tq.cols());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd, gd) = (tq.data(), tk.data(), tv.data(), g.data());
        let mut gq = vec![0.0; rows * d];
        let mut gk = vec![0.0; rows * d];
        let mut gv = vec![0.0; rows * d];
        let mut dp = Vec::new();
        for (si, s) in segments.iter().enumerate() {
            let n = s.len;
            for h in 0..heads {
                let p = &probs[si * heads + h];
                let off = h * dh;
                let at = |row: usize| (s.start + row) * d + off;
                for i in 0..n {
                    let upto = if causal { i + 1 } else { n };
                    let gi = &gd[at(i)..at(i) + dh];
                    dp.clear();
                    for j in 0..upto {
                        dp.push(dot(gi, &vd[at(j)..at(j) + dh]));
                        let pij = p[i * n + j];
                        for (o, &x) in gv[at(j)..at(j) + dh].iter_mut().zip(gi) {
                            *o += pij * x;
                        }
                    }
                    let inner: f64 = (0..upto).map(|j| p[i * n + j] * dp[j]).sum();
                    for j in 0..upto {
                        let ds = p[i * n + j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            gq[at(i) + c] += ds * kd[at(j) + c];
                            gk[at(j) + c] += ds * qd[at(i) + c];
                        }
                    }
                }
            }
        }
        self.acc(grads, q, Tensor::matrix(rows, d, gq));
        self.acc(grads, k, Tensor::matrix(rows, d, gk));
        self.acc(grads, v, Tensor::matrix(rows, d, gv));
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = t.row_softmax(a);
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);

        let b = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = t.row_softmax(b);
        // e^k / (e + e^2 + e^3), evaluated independently
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (got, k) in t.value(s).data().iter().zip([1.0f64, 2.0, 3.0]) {
            assert!((got - k.exp() / z).abs() < 1e-15);
        }
        let want = [0.0900, 0.2447, 0.6652];
        for (got, w) in t.value(s).data().iter().zip(want) {
            assert!((got - w).abs() < 1e-4);
        }
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::identity(2));
        let a = t.constant(Tensor::matrix(2, 2, vec![1.5, -2.0, 0.25, 4.0]));
        let p = t.matmul(i, a).unwrap();
        assert_eq!(t.value(p), t.value(a));
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn sum_and_mean_square_gradients() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let m = t.mean(sq);
        let g = t.backward(m).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let y = t.param(Tensor::vector(vec![5.0]));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert!(g.get(y).is_none());
        assert_eq!(g.wrt(y).data(), &[0.0]);
    }

    #[test]
    fn diamond_accumulates() {
        // f(x) = sum(tanh(x) * exp(x)) with x used on both branches
        let xs = vec![0.3, -0.7, 1.1];
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(xs.clone()));
        let a = t.tanh(x);
        let b = t.exp(x);
        let p = t.mul(a, b).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap().wrt(x);
        for (gi, &xi) in g.data().iter().zip(&xs) {
            let th: f64 = xi.tanh();
            let oracle = (1.0 - th * th) * xi.exp() + th * xi.exp();
            assert!((gi - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_requires_mask() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros(&[2, 4]));
        assert_eq!(
            t.masked_cross_entropy(l, &[0, 1], &[false, false]).unwrap_err(),
            TensorError::EmptyMask
        );
        let ce = t.masked_cross_entropy(l, &[0, 1], &[true, false]).unwrap();
        assert!((t.value(ce).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn attention_single_key_passthrough() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::matrix(1, 4, vec![0.1, 0.2, 0.3, 0.4]));
        let k = t.constant(Tensor::matrix(1, 4, vec![1.0, -1.0, 0.5, 0.0]));
        let v = t.constant(Tensor::matrix(1, 4, vec![3.0, 2.0, 1.0, 0.0]));
        let o = t
            .attention(q, k, v, 2, true, &[Segment { start: 0, len: 1 }])
            .unwrap();
        assert_eq!(t.value(o).data(), &[3.0, 2.0, 1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn softmax_rows_normalised_and_shift_invariant(
            row in proptest::collection::vec(-30.0f64..30.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let mut t = Tape::new();
            let a = t.constant(Tensor::vector(row.clone()));
            let b = t.constant(Tensor::vector(row.iter().map(|v| v + shift).collect()));
            let sa = t.row_softmax(a);
            let sb = t.row_softmax(b);
            let total: f64 = t.value(sa).data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(t.value(sa).max_abs_diff(t.value(sb)) < 1e-9);
        }
    }
}
