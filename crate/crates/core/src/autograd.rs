//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends a node holding its output value. Nodes whose
//! inputs are all constants are marked as not requiring gradients and are
//! skipped entirely during `backward`, so frozen computation costs only
//! its forward pass.

use crate::error::{Error, Result};
use crate::tensor::{
    gemm, rmsnorm_rows, rope_inplace, silu, silu_grad, softmax_rows_backward,
    softmax_rows_inplace, Mask, MatMut, MatRef, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, a_t: bool, b_t: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Embedding { table: Var, ids: Vec<u32> },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f32> },
    Silu(Var),
    Softmax { x: Var },
    Rope { x: Var, positions: Vec<usize>, theta: f32, head_dim: usize },
    Attention { q: Var, k: Var, v: Var, n_heads: usize, scale: f32, probs: Vec<f32> },
    CrossEntropy { logits: Var, targets: Vec<u32>, probs: Vec<f32> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
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

    /// Total elements held by node values and saved buffers.
    pub fn live_elements(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| {
                let saved = match &n.op {
                    Op::Attention { probs, .. } | Op::CrossEntropy { probs, .. } => probs.len(),
                    _ => 0,
                };
                if matches!(n.op, Op::Leaf) {
                    saved
                } else {
                    n.value.numel() + saved
                }
            })
            .sum()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last `backward`, if the node received any.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    // ---- primitives -------------------------------------------------------

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// Matrix product `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, true)
    }

    /// Matrix product of optionally transposed operands.
    pub fn matmul_t(&mut self, a: Var, a_t: bool, b: Var, b_t: bool) -> Result<Var> {
        let (ar, ac) = dims2(self.value(a));
        let (br, bc) = dims2(self.value(b));
        let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != k2 || self.value(a).shape().len() != 2 || self.value(b).shape().len() != 2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a),
                rhs: self.shape(b),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            MatRef::new(self.value(a).data(), ac, a_t),
            MatRef::new(self.value(b).data(), bc, b_t),
            0.0,
            MatMut::new(&mut out, n),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_vec(vec![m, n], out),
            rg,
            Op::MatMul { a, b, a_t, b_t },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a),
                rhs: self.shape(b),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(self.shape(a), out), rg, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(self.shape(a), out), rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out: Vec<f32> = self.value(a).data().iter().map(|x| x * s).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_vec(self.shape(a), out), rg, Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f32 = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    /// Stacks 2-D tensors vertically (the `⊕` used for key/value concatenation).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        let rg = self.rg(parts);
        Ok(self.push(value, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.value(p).rows()).unwrap_or(0);
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]),
                    rhs: self.shape(p),
                });
            }
            total += self.value(p).cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_vec(vec![rows, total], out),
            rg,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, end)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = dims2(self.value(x));
        if start > end || end > cols {
            return Err(Error::Index {
                what: "column slice",
                index: end,
                bound: cols,
            });
        }
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&self.value(x).row(r)[start..end]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_vec(vec![rows, end - start], out),
            rg,
            Op::SliceCols { x, start },
        ))
    }

    /// Gathers rows of `table` by token id.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (vocab, width) = dims2(self.value(table));
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_vec(vec![ids.len(), width], out),
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Per-row RMS normalization scaled by `gain`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(gain).numel() != cols {
            return Err(Error::Dimension {
                op: "rmsnorm",
                lhs: self.shape(x),
                rhs: self.shape(gain),
            });
        }
        let (out, inv_rms) = rmsnorm_rows(self.value(x).data(), self.value(gain).data(), cols);
        let rg = self.rg(&[x, gain]);
        Ok(self.push(
            Tensor::from_vec(self.shape(x), out),
            rg,
            Op::RmsNorm { x, gain, inv_rms },
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out: Vec<f32> = self.value(x).data().iter().map(|&v| silu(v)).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(self.shape(x), out), rg, Op::Silu(x))
    }

    /// Row-wise softmax. Rejects non-finite input.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "softmax_rows",
                detail: "non-finite input".into(),
            });
        }
        let mut out = self.value(x).to_vec();
        softmax_rows_inplace(&mut out, self.value(x).cols(), Mask::None);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(self.shape(x), out), rg, Op::Softmax { x }))
    }

    /// Rotary position embedding applied to each `head_dim`-wide block of every row.
    pub fn rope(&mut self, x: Var, positions: &[usize], theta: f32, head_dim: usize) -> Result<Var> {
        let (rows, cols) = dims2(self.value(x));
        if head_dim % 2 != 0 || head_dim == 0 || cols % head_dim != 0 {
            return Err(Error::contract(format!(
                "rotary embedding needs an even head width dividing {cols}, got {head_dim}"
            )));
        }
        if positions.len() != rows {
            return Err(Error::Dimension {
                op: "rope",
                lhs: self.shape(x),
                rhs: vec![positions.len()],
            });
        }
        let mut out = self.value(x).to_vec();
        rope_inplace(&mut out, cols, positions, theta, head_dim, 1.0);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_vec(self.shape(x), out),
            rg,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                theta,
                head_dim,
            },
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[tq × d]`, `k` and `v` are `[tk × d]`; heads are contiguous
    /// column blocks of width `d / n_heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize, mask: Mask) -> Result<Var> {
        let (tq, d) = dims2(self.value(q));
        let (tk, dk) = dims2(self.value(k));
        if dk != d || self.value(v).shape() != self.value(k).shape() || d % n_heads != 0 {
            return Err(Error::Dimension {
                op: "attention",
                lhs: self.shape(q),
                rhs: self.shape(k),
            });
        }
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut probs = vec![0.0f32; n_heads * tq * tk];
        let mut out = vec![0.0f32; tq * d];
        {
            let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            for h in 0..n_heads {
                let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
                gemm(
                    tq,
                    hd,
                    tk,
                    scale,
                    MatRef::cols_block(qd, d, h * hd, false),
                    MatRef::cols_block(kd, d, h * hd, true),
                    0.0,
                    MatMut::new(p, tk),
                );
                softmax_rows_inplace(p, tk, mask);
                gemm(
                    tq,
                    tk,
                    hd,
                    1.0,
                    MatRef::new(p, tk, false),
                    MatRef::cols_block(vd, d, h * hd, false),
                    0.0,
                    MatMut::cols_block(&mut out, d, h * hd),
                );
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::from_vec(vec![tq, d], out),
            rg,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                scale,
                probs,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (t, vocab) = dims2(self.value(logits));
        if targets.len() != t || t == 0 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: self.shape(logits),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad as usize,
                bound: vocab,
            });
        }
        let mut probs = self.value(logits).to_vec();
        softmax_rows_inplace(&mut probs, vocab, Mask::None);
        let mut total = 0.0f32;
        for (i, &tgt) in targets.iter().enumerate() {
            total += crate::tensor::nll_of_row(self.value(logits).row(i), tgt as usize);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / t as f32),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Fills gradient buffers for every node reachable from `loss` that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f32>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&mut self, idx: usize, g: &[f32]) {
        // Detach the op so inputs can be borrowed mutably while reading saved state.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        let out_shape = self.nodes[idx].value.shape().to_vec();
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, a_t, b_t } => self.back_matmul(*a, *b, *a_t, *b_t, g, &out_shape),
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(buf) = self.acc(v) {
                        buf.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).clone();
                let bv = self.value(*b).clone();
                if let Some(buf) = self.acc(*a) {
                    for ((d, s), y) in buf.iter_mut().zip(g).zip(bv.data()) {
                        *d += s * y;
                    }
                }
                if let Some(buf) = self.acc(*b) {
                    for ((d, s), x) in buf.iter_mut().zip(g).zip(av.data()) {
                        *d += s * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(buf) = self.acc(*a) {
                    buf.iter_mut().zip(g).for_each(|(d, x)| *d += x * s);
                }
            }
            Op::Sum(a) => {
                if let Some(buf) = self.acc(*a) {
                    buf.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(buf) = self.acc(p) {
                        buf.iter_mut().zip(&g[off..off + n]).for_each(|(d, s)| *d += s);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = *out_shape.last().unwrap_or(&0);
                let mut col0 = 0;
                for &p in parts {
                    let (rows, cols) = dims2(self.value(p));
                    if let Some(buf) = self.acc(p) {
                        for r in 0..rows {
                            let src = &g[r * total + col0..r * total + col0 + cols];
                            buf[r * cols..(r + 1) * cols]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    col0 += cols;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = self.value(*x).cols();
                if let Some(buf) = self.acc(*x) {
                    buf[start * cols..start * cols + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, s)| *d += s);
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = dims2(self.value(*x));
                let w = *out_shape.last().unwrap_or(&0);
                if let Some(buf) = self.acc(*x) {
                    for r in 0..rows {
                        buf[r * cols + start..r * cols + start + w]
                            .iter_mut()
                            .zip(&g[r * w..(r + 1) * w])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let width = self.value(*table).cols();
                if let Some(buf) = self.acc(*table) {
                    for (i, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        buf[id * width..(id + 1) * width]
                            .iter_mut()
                            .zip(&g[i * width..(i + 1) * width])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x).clone();
                let gv = self.value(*gain).clone();
                let cols = xv.cols();
                if let Some(buf) = self.acc(*gain) {
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let xr = xv.row(r);
                        for j in 0..cols {
                            buf[j] += g[r * cols + j] * xr[j] * ir;
                        }
                    }
                }
                if let Some(buf) = self.acc(*x) {
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let xr = xv.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f32 = (0..cols).map(|j| gr[j] * gv.data()[j] * xr[j]).sum();
                        let c = ir * ir * ir * dot / cols as f32;
                        for j in 0..cols {
                            buf[r * cols + j] += ir * gr[j] * gv.data()[j] - xr[j] * c;
                        }
                    }
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).clone();
                if let Some(buf) = self.acc(*x) {
                    for ((d, s), &v) in buf.iter_mut().zip(g).zip(xv.data()) {
                        *d += s * silu_grad(v);
                    }
                }
            }
            Op::Softmax { x } => {
                let y = self.nodes[idx].value.clone();
                let cols = y.cols();
                if let Some(buf) = self.acc(*x) {
                    softmax_rows_backward(y.data(), g, buf, cols);
                }
            }
            Op::Rope {
                x,
                positions,
                theta,
                head_dim,
            } => {
                let cols = self.value(*x).cols();
                if let Some(buf) = self.acc(*x) {
                    let mut back = g.to_vec();
                    rope_inplace(&mut back, cols, positions, *theta, *head_dim, -1.0);
                    buf.iter_mut().zip(back).for_each(|(d, s)| *d += s);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                scale,
                probs,
            } => self.back_attention(*q, *k, *v, *n_heads, *scale, probs, g),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = self.value(*logits).cols();
                let t = targets.len() as f32;
                if let Some(buf) = self.acc(*logits) {
                    for (i, &tgt) in targets.iter().enumerate() {
                        let row = &probs[i * vocab..(i + 1) * vocab];
                        for (j, &p) in row.iter().enumerate() {
                            let onehot = if j == tgt as usize { 1.0 } else { 0.0 };
                            buf[i * vocab + j] += g[0] * (p - onehot) / t;
                        }
                    }
                }
            }
        }
        self.nodes[idx].op = op;
    }

    fn back_matmul(&mut self, a: Var, b: Var, a_t: bool, b_t: bool, g: &[f32], out_shape: &[usize]) {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let (ar, ac) = dims2(&av);
        let (br, bc) = dims2(&bv);
        let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
        let n = out_shape[1];
        if let Some(buf) = self.acc(a) {
            if a_t {
                // stored [k×m] += op(B)[k×n] · gᵀ[n×m]
                gemm(k, n, m, 1.0, MatRef::new(bv.data(), bc, b_t), MatRef::new(g, n, true), 1.0, MatMut::new(buf, m));
            } else {
                // [m×k] += g[m×n] · op(B)ᵀ[n×k]
                gemm(m, n, k, 1.0, MatRef::new(g, n, false), MatRef::new(bv.data(), bc, !b_t), 1.0, MatMut::new(buf, k));
            }
        }
        if let Some(buf) = self.acc(b) {
            if b_t {
                // stored [n×k] += gᵀ[n×m] · op(A)[m×k]
                gemm(n, m, k, 1.0, MatRef::new(g, n, true), MatRef::new(av.data(), ac, a_t), 1.0, MatMut::new(buf, k));
            } else {
                // [k×n] += op(A)ᵀ[k×m] · g[m×n]
                gemm(k, m, n, 1.0, MatRef::new(av.data(), ac, !a_t), MatRef::new(g, n, false), 1.0, MatMut::new(buf, n));
            }
        }
        let _ = br;
    }

    #[allow(clippy::too_many_arguments)]
    fn back_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize, scale: f32, probs: &[f32], g: &[f32]) {
        let qv = self.value(q).clone();
        let kv = self.value(k).clone();
        let vv = self.value(v).clone();
        let (tq, d) = dims2(&qv);
        let tk = kv.rows();
        let hd = d / n_heads;
        let need_q = self.nodes[q.0].requires_grad;
        let need_k = self.nodes[k.0].requires_grad;
        let need_v = self.nodes[v.0].requires_grad;
        let mut dq = vec![0.0f32; if need_q { tq * d } else { 0 }];
        let mut dk = vec![0.0f32; if need_k { tk * d } else { 0 }];
        let mut dv = vec![0.0f32; if need_v { tk * d } else { 0 }];
        let mut dp = vec![0.0f32; tq * tk];
        let mut ds = vec![0.0f32; tq * tk];
        for h in 0..n_heads {
            let p = &probs[h * tq * tk..(h + 1) * tq * tk];
            let go = MatRef::cols_block(g, d, h * hd, false);
            if need_v {
                // dV_h += Pᵀ · dO_h
                gemm(tk, tq, hd, 1.0, MatRef::new(p, tk, true), go, 1.0, MatMut::cols_block(&mut dv, d, h * hd));
            }
            if !(need_q || need_k) {
                continue;
            }
            // dP = dO_h · V_hᵀ
            gemm(tq, hd, tk, 1.0, go, MatRef::cols_block(vv.data(), d, h * hd, true), 0.0, MatMut::new(&mut dp, tk));
            ds.iter_mut().for_each(|x| *x = 0.0);
            softmax_rows_backward(p, &dp, &mut ds, tk);
            if need_q {
                gemm(tq, tk, hd, scale, MatRef::new(&ds, tk, false), MatRef::cols_block(kv.data(), d, h * hd, false), 1.0, MatMut::cols_block(&mut dq, d, h * hd));
            }
            if need_k {
                gemm(tk, tq, hd, scale, MatRef::new(&ds, tk, true), MatRef::cols_block(qv.data(), d, h * hd, false), 1.0, MatMut::cols_block(&mut dk, d, h * hd));
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(acc) = self.acc(var) {
                acc.iter_mut().zip(buf).for_each(|(d, s)| *d += s);
            }
        }
    }
}
