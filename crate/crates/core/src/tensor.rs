//! Dense row-major f64 tensors and the raw numeric kernels.
//!
//! Everything downstream (tape ops, the transformer, probes) calls into the
//! kernels here, so the taped and untaped forward paths share one set of
//! numeric routines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RMS_EPS: f64 = 1e-6;

/// Additive causal-mask value. Finite so the no-NaN invariant holds, yet
/// large enough that `exp(x - max)` underflows to exactly 0.0 for masked
/// entries.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {shape:?} wants {numel} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows × cols view of the shape: 1-D tensors count as a single row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => (self.shape[..self.shape.len() - 1].iter().product(), *self.shape.last().unwrap()),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.rows_cols();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let (_, cols) = self.rows_cols();
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }
}

// ── elementwise ──────────────────────────────────────────────────────────

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch {
            op: "add",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor { shape: a.shape.clone(), data })
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch {
            op: "mul",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Tensor { shape: a.shape.clone(), data })
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    Tensor { shape: a.shape.clone(), data: a.data.iter().map(|x| x * s).collect() }
}

pub fn axpy(acc: &mut [f64], s: f64, x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += s * b;
    }
}

// ── matmul ───────────────────────────────────────────────────────────────

/// C(m×n) = A(m×k) · B(k×n). Accumulates over B rows so the inner loop
/// vectorizes.
pub fn matmul_into(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    c.fill(0.0);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                axpy(crow, av, &b[p * n..(p + 1) * n]);
            }
        }
    }
}

/// C(m×n) = A(m×k) · B(n×k)ᵀ.
pub fn matmul_nt_into(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = dot(arow, brow);
        }
    }
}

/// C(k×n) = A(m×k)ᵀ · B(m×n).
pub fn matmul_tn_into(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    c.fill(0.0);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                axpy(&mut c[p * n..(p + 1) * n], av, brow);
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.rows_cols();
    let (k2, n) = b.rows_cols();
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            detail: format!("{:?} · {:?}", a.shape(), b.shape()),
        });
    }
    let mut c = vec![0.0; m * n];
    matmul_into(&mut c, &a.data, &b.data, m, k, n);
    Tensor::new(vec![m, n], c)
}

/// A(m×k) · B(n×k)ᵀ → (m×n).
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.rows_cols();
    let (n, k2) = b.rows_cols();
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            detail: format!("{:?} · {:?}ᵀ", a.shape(), b.shape()),
        });
    }
    let mut c = vec![0.0; m * n];
    matmul_nt_into(&mut c, &a.data, &b.data, m, k, n);
    Tensor::new(vec![m, n], c)
}

// ── row-wise nonlinearities ─────────────────────────────────────────────

/// Row-wise softmax over the last dimension, with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (rows, cols) = x.rows_cols();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let xin = &x.data[r * cols..(r + 1) * cols];
        let o = &mut out[r * cols..(r + 1) * cols];
        softmax_row_into(o, xin);
    }
    Tensor { shape: x.shape.clone(), data: out }
}

pub fn softmax_row_into(out: &mut [f64], x: &[f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// dL/dx for y = softmax(x): dx = y ⊙ (dy − Σ dy⊙y), row-wise.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let (rows, cols) = y.rows_cols();
    let mut dx = vec![0.0; rows * cols];
    for r in 0..rows {
        let yr = &y.data[r * cols..(r + 1) * cols];
        let dyr = &dy.data[r * cols..(r + 1) * cols];
        let s = dot(yr, dyr);
        for c in 0..cols {
            dx[r * cols + c] = yr[c] * (dyr[c] - s);
        }
    }
    Tensor { shape: y.shape.clone(), data: dx }
}

/// Row-wise RMS normalization with a learned gain:
/// y = x ⊙ g / sqrt(mean(x²) + eps).
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    let (rows, cols) = x.rows_cols();
    if gain.numel() != cols {
        return Err(Error::ShapeMismatch {
            op: "rms_norm",
            detail: format!("gain {:?} vs row width {cols}", gain.shape()),
        });
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let xr = &x.data[r * cols..(r + 1) * cols];
        rms_norm_row_into(&mut out[r * cols..(r + 1) * cols], xr, &gain.data, eps);
    }
    Ok(Tensor { shape: x.shape.clone(), data: out })
}

pub fn rms_norm_row_into(out: &mut [f64], x: &[f64], gain: &[f64], eps: f64) {
    let n = x.len();
    let ms = dot(x, x) / n as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    for i in 0..n {
        out[i] = x[i] * gain[i] * inv;
    }
}

/// Gradients of rms_norm: returns (dx, dgain).
pub fn rms_norm_backward(x: &Tensor, gain: &Tensor, eps: f64, dy: &Tensor) -> (Tensor, Tensor) {
    let (rows, cols) = x.rows_cols();
    let n = cols as f64;
    let mut dx = vec![0.0; rows * cols];
    let mut dg = vec![0.0; cols];
    for r in 0..rows {
        let xr = &x.data[r * cols..(r + 1) * cols];
        let dyr = &dy.data[r * cols..(r + 1) * cols];
        let ms = dot(xr, xr) / n;
        let rms = (ms + eps).sqrt();
        let inv = 1.0 / rms;
        // s = Σ_i dy_i g_i x_i
        let mut s = 0.0;
        for i in 0..cols {
            s += dyr[i] * gain.data[i] * xr[i];
        }
        let k = s / (n * rms * rms * rms);
        for i in 0..cols {
            dx[r * cols + i] = dyr[i] * gain.data[i] * inv - xr[i] * k;
            dg[i] += dyr[i] * xr[i] * inv;
        }
    }
    (
        Tensor { shape: x.shape.clone(), data: dx },
        Tensor { shape: gain.shape.clone(), data: dg },
    )
}

const GELU_C: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let u = k * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let u = k * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn gelu(x: &Tensor) -> Tensor {
    Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| gelu_scalar(v)).collect() }
}

// ── lookup / slicing ────────────────────────────────────────────────────

/// Gathers rows of `table` by index.
pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (rows, cols) = table.rows_cols();
    let mut out = vec![0.0; ids.len() * cols];
    for (i, &id) in ids.iter().enumerate() {
        if id >= rows {
            return Err(Error::TokenOutOfRange { id, vocab: rows });
        }
        out[i * cols..(i + 1) * cols].copy_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), cols], out)
}

/// Contiguous row slice [r0, r1).
pub fn slice_rows(x: &Tensor, r0: usize, r1: usize) -> Result<Tensor> {
    let (rows, cols) = x.rows_cols();
    if r0 > r1 || r1 > rows {
        return Err(Error::ShapeMismatch {
            op: "slice_rows",
            detail: format!("range {r0}..{r1} of {rows} rows"),
        });
    }
    Tensor::new(vec![r1 - r0, cols], x.data[r0 * cols..r1 * cols].to_vec())
}

/// Row-wise concatenation.
pub fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ra, ca) = a.rows_cols();
    let (rb, cb) = b.rows_cols();
    if ca != cb {
        return Err(Error::ShapeMismatch {
            op: "concat_rows",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let mut data = Vec::with_capacity((ra + rb) * ca);
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::new(vec![ra + rb, ca], data)
}

/// Lower-triangular additive causal mask (0 on/below diagonal, MASK_VALUE above).
pub fn causal_mask(seq: usize) -> Tensor {
    let mut data = vec![0.0; seq * seq];
    for i in 0..seq {
        for j in (i + 1)..seq {
            data[i * seq + j] = MASK_VALUE;
        }
    }
    Tensor { shape: vec![seq, seq], data }
}
