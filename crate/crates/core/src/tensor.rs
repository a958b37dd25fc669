//! Dense row-major f32 tensors and the numeric kernels shared by the
//! forward and backward passes.
//!
//! Every kernel uses a fixed, serial reduction order so that identical
//! inputs always produce identical bits.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};

/// Immutable dense tensor. Cloning shares the underlying buffer.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f32]>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: data.into(),
        })
    }

    pub(crate) fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: data.into(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape.to_vec(), vec![0.0; n])
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_vec(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Self::from_vec(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f32, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| standard_normal(rng) * std)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.to_vec()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a 2-D tensor; a 1-D tensor is one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    /// Rows `range` of a 2-D tensor as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if start > end || end > self.rows() {
            return Err(Error::Index {
                what: "row slice",
                index: end,
                bound: self.rows(),
            });
        }
        let c = self.cols();
        Ok(Self::from_vec(
            vec![end - start, c],
            self.data[start * c..end * c].to_vec(),
        ))
    }

    /// Vertical stack of 2-D tensors with equal column counts.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts.first().map(|t| t.cols()).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: p.shape.clone(),
                });
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_vec(vec![rows, cols], data))
    }

    /// Bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Box-Muller standard normal sample.
pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

/// Strided read-only matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    /// Plain row-major matrix with `cols` columns, optionally read transposed.
    pub fn new(data: &'a [f32], cols: usize, transposed: bool) -> Self {
        if transposed {
            Self { data, offset: 0, rs: 1, cs: cols }
        } else {
            Self { data, offset: 0, rs: cols, cs: 1 }
        }
    }

    /// Column block `[col0, col0 + width)` of a row-major matrix with `cols` columns.
    pub fn cols_block(data: &'a [f32], cols: usize, col0: usize, transposed: bool) -> Self {
        // Either way the block starts at element `col0` of row 0.
        let mut m = Self::new(data, cols, transposed);
        m.offset = col0;
        m
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f32 {
        self.data[self.offset + i * self.rs + j * self.cs]
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + rows.saturating_sub(1) * self.rs + cols.saturating_sub(1) * self.cs
    }
}

pub(crate) struct MatMut<'a> {
    pub data: &'a mut [f32],
    pub offset: usize,
    pub rs: usize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f32], cols: usize) -> Self {
        Self { data, offset: 0, rs: cols }
    }

    pub fn cols_block(data: &'a mut [f32], cols: usize, col0: usize) -> Self {
        Self { data, offset: col0, rs: cols }
    }
}

/// `C = alpha * A·B + beta * C` for logical shapes A[m×k], B[k×n], C[m×n].
///
/// Single-row products take a hand-written path; everything else goes
/// through `matrixmultiply`, which accumulates each output element in a
/// fixed order independent of the other rows.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f32,
    c: MatMut<'_>,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c.offset + i * c.rs + j;
                c.data[idx] *= beta;
            }
        }
        return;
    }
    assert!(a.last_index(m, k) < a.data.len(), "gemm: A out of bounds");
    assert!(b.last_index(k, n) < b.data.len(), "gemm: B out of bounds");
    assert!(
        c.offset + (m - 1) * c.rs + n - 1 < c.data.len(),
        "gemm: C out of bounds"
    );
    if m == 1 {
        gemv_row(k, n, alpha, a, b, beta, c);
        return;
    }
    // SAFETY: all three views were bounds-checked above for the logical
    // extents that sgemm touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            1,
        );
    }
}

fn gemv_row(k: usize, n: usize, alpha: f32, a: MatRef<'_>, b: MatRef<'_>, beta: f32, c: MatMut<'_>) {
    let out = &mut c.data[c.offset..c.offset + n];
    if b.cs == 1 {
        let mut acc = vec![0.0f32; n];
        for p in 0..k {
            let ap = a.at(0, p);
            let row = &b.data[b.offset + p * b.rs..b.offset + p * b.rs + n];
            for (s, &w) in acc.iter_mut().zip(row) {
                *s += ap * w;
            }
        }
        for (o, s) in out.iter_mut().zip(acc) {
            *o = if beta == 0.0 { alpha * s } else { beta * *o + alpha * s };
        }
    } else {
        for (j, o) in out.iter_mut().enumerate() {
            let mut s = 0.0f32;
            for p in 0..k {
                s += a.at(0, p) * b.at(p, j);
            }
            *o = if beta == 0.0 { alpha * s } else { beta * *o + alpha * s };
        }
    }
}

/// Plain `A[m×k] · B[k×n]` (with optional transposed storage) into a fresh buffer.
#[cfg(test)]
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_raw(
    a: &[f32],
    a_cols: usize,
    a_t: bool,
    b: &[f32],
    b_cols: usize,
    b_t: bool,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        1.0,
        MatRef::new(a, a_cols, a_t),
        MatRef::new(b, b_cols, b_t),
        0.0,
        MatMut::new(&mut out, n),
    );
    out
}

/// Visibility rule for attention-style softmax.
///
/// Columns `0..prefix` are memory entries visible to every row (unless
/// `prefix_visible` is false). Column `prefix + t` is visible to row `i`
/// iff `t <= i + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    None,
    Causal {
        prefix: usize,
        prefix_visible: bool,
        offset: usize,
    },
}

impl Mask {
    pub fn causal(prefix: usize) -> Self {
        Mask::Causal {
            prefix,
            prefix_visible: true,
            offset: 0,
        }
    }

    #[inline]
    pub fn visible(&self, row: usize, col: usize) -> bool {
        match *self {
            Mask::None => true,
            Mask::Causal {
                prefix,
                prefix_visible,
                offset,
            } => {
                if col < prefix {
                    prefix_visible
                } else {
                    col - prefix <= row + offset
                }
            }
        }
    }
}

/// In-place row softmax with max subtraction; masked entries become 0.
pub(crate) fn softmax_rows_inplace(x: &mut [f32], cols: usize, mask: Mask) {
    for (i, row) in x.chunks_mut(cols).enumerate() {
        let mut max = f32::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if mask.visible(i, j) && v > max {
                max = v;
            }
        }
        let mut sum = 0.0f32;
        for (j, v) in row.iter_mut().enumerate() {
            if mask.visible(i, j) {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Softmax backward given output `y` and upstream `dy`, accumulated into `dx`.
pub(crate) fn softmax_rows_backward(y: &[f32], dy: &[f32], dx: &mut [f32], cols: usize) {
    for ((yr, dyr), dxr) in y.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot: f32 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d += yv * (g - dot);
        }
    }
}

pub const RMS_EPS: f32 = 1e-5;

/// RMS normalization per row; returns (output, per-row inverse rms).
pub(crate) fn rmsnorm_rows(x: &[f32], gain: &[f32], cols: usize) -> (Vec<f32>, Vec<f32>) {
    let mut out = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(x.len() / cols.max(1));
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let ms: f32 = xr.iter().map(|v| v * v).sum::<f32>() / cols as f32;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        inv.push(r);
        for ((o, &v), &g) in or.iter_mut().zip(xr).zip(gain) {
            *o = v * r * g;
        }
    }
    (out, inv)
}

#[inline]
pub(crate) fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu_grad(x: f32) -> f32 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Rotary frequency for pair `i` of a head of width `head_dim`.
#[inline]
fn rope_angle(pos: usize, i: usize, head_dim: usize, theta: f32) -> (f32, f32) {
    let freq = (theta as f64).powf(-2.0 * i as f64 / head_dim as f64);
    let ang = pos as f64 * freq;
    (ang.cos() as f32, ang.sin() as f32)
}

/// Rotates interleaved pairs `(2i, 2i+1)` of every head in place.
/// `sign = -1.0` applies the inverse rotation.
pub(crate) fn rope_inplace(
    x: &mut [f32],
    cols: usize,
    positions: &[usize],
    theta: f32,
    head_dim: usize,
    sign: f32,
) {
    let half = head_dim / 2;
    for (row, &pos) in x.chunks_mut(cols).zip(positions) {
        if pos == 0 {
            continue;
        }
        let table: Vec<(f32, f32)> = (0..half).map(|i| rope_angle(pos, i, head_dim, theta)).collect();
        for head in row.chunks_mut(head_dim) {
            for (i, &(c, s)) in table.iter().enumerate() {
                let s = s * sign;
                let a = head[2 * i];
                let b = head[2 * i + 1];
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

/// SHA-256 over names, shapes and little-endian values, as lowercase hex.
pub fn digest_tensors<'a>(named: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (name, t) in named {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// SHA-256 of arbitrary bytes as lowercase hex.
pub fn digest_bytes(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Negative log-likelihood of `target` under `softmax(logits)`.
pub fn nll_of_row(logits: &[f32], target: usize) -> f32 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = logits.iter().map(|v| (v - max).exp()).sum();
    sum.ln() + max - logits[target]
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 3));
    }

    #[test]
    fn slice_then_concat_is_identity() {
        let t = Tensor::from_fn(&[5, 3], |i| i as f32 * 0.37 - 1.0);
        let a = t.slice_rows(0, 2).unwrap();
        let b = t.slice_rows(2, 5).unwrap();
        assert!(Tensor::concat_rows(&[&a, &b]).unwrap().bit_eq(&t));
    }

    #[test]
    fn gemv_matches_gemm() {
        let a: Vec<f32> = (0..6).map(|i| i as f32 * 0.5).collect();
        let b: Vec<f32> = (0..12).map(|i| (i as f32).sin()).collect();
        let single = matmul_raw(&a[..3], 3, false, &b, 4, false, 1, 3, 4);
        let both = matmul_raw(&a, 3, false, &b, 4, false, 2, 3, 4);
        for j in 0..4 {
            assert!((single[j] - both[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_inverse_restores_input() {
        let orig: Vec<f32> = (0..16).map(|i| (i as f32 * 0.3).cos()).collect();
        let mut x = orig.clone();
        rope_inplace(&mut x, 8, &[3, 11], 10000.0, 4, 1.0);
        rope_inplace(&mut x, 8, &[3, 11], 10000.0, 4, -1.0);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_rules() {
        let m = Mask::causal(2);
        assert!(m.visible(0, 0) && m.visible(0, 1) && m.visible(0, 2));
        assert!(!m.visible(0, 3));
        assert!(m.visible(1, 3));
        let hidden = Mask::Causal {
            prefix: 2,
            prefix_visible: false,
            offset: 0,
        };
        assert!(!hidden.visible(5, 1));
    }
}
