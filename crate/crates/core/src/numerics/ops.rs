//! Forward kernels shared by the tape and by tape-free inference, so both
//! paths produce bit-identical values.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::Tensor;
use crate::error::{Error, Result};

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Contract(format!(
            "{op}: expected a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `a · b` for `a: N×K`, `b: K×M`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = require_matrix("matmul", a)?;
    let (k2, m) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; n * m];
    let ad = a.data();
    accumulate_rows(&mut out, m, b.data(), k, |i, p| ad[i * k + p]);
    Tensor::matrix(n, m, out)
}

/// `out[i, :] += Σ_p coef(i, p) · b[p, :]` with `p` ascending for every
/// output row. Four output rows share each pass over `b`; the per-element
/// summation order is the same as the naive loop.
fn accumulate_rows(out: &mut [f64], m: usize, b: &[f64], k: usize, coef: impl Fn(usize, usize) -> f64) {
    let n = out.len() / m.max(1);
    let mut blocks = out.chunks_exact_mut(4 * m);
    let mut i0 = 0;
    for block in &mut blocks {
        let (r0, rest) = block.split_at_mut(m);
        let (r1, rest) = rest.split_at_mut(m);
        let (r2, r3) = rest.split_at_mut(m);
        for p in 0..k {
            let (c0, c1, c2, c3) = (coef(i0, p), coef(i0 + 1, p), coef(i0 + 2, p), coef(i0 + 3, p));
            let brow = &b[p * m..(p + 1) * m];
            for j in 0..m {
                let bv = brow[j];
                r0[j] += c0 * bv;
                r1[j] += c1 * bv;
                r2[j] += c2 * bv;
                r3[j] += c3 * bv;
            }
        }
        i0 += 4;
    }
    for i in i0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let c = coef(i, p);
            for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += c * bv;
            }
        }
    }
}

/// `a · bᵀ` for `a: N×K`, `b: M×K`.
pub fn matmul_a_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = require_matrix("matmul_a_bt", a)?;
    let (m, k2) = require_matrix("matmul_a_bt", b)?;
    if k != k2 {
        return Err(Error::shape("matmul_a_bt", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        let mut j = 0;
        while j + 4 <= m {
            let d = dot4(arow, [0, 1, 2, 3].map(|o| &bd[(j + o) * k..(j + o + 1) * k]));
            orow[j..j + 4].copy_from_slice(&d);
            j += 4;
        }
        for j in j..m {
            orow[j] = dot(arow, &bd[j * k..(j + 1) * k]);
        }
    }
    Tensor::matrix(n, m, out)
}

/// `aᵀ · b` for `a: N×K`, `b: N×M`.
pub fn matmul_at_b(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = require_matrix("matmul_at_b", a)?;
    let (n2, m) = require_matrix("matmul_at_b", b)?;
    if n != n2 {
        return Err(Error::shape("matmul_at_b", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; k * m];
    let ad = a.data();
    accumulate_rows(&mut out, m, b.data(), n, |i, r| ad[r * k + i]);
    Tensor::matrix(k, m, out)
}

/// Four [`dot`] products sharing `a`, each with the same summation order.
fn dot4(a: &[f64], b: [&[f64]; 4]) -> [f64; 4] {
    let mut acc = [[0.0f64; 4]; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let av = &a[c * 4..c * 4 + 4];
        for (accq, bq) in acc.iter_mut().zip(&b) {
            let bv = &bq[c * 4..c * 4 + 4];
            for l in 0..4 {
                accq[l] += av[l] * bv[l];
            }
        }
    }
    let mut out = [0.0; 4];
    for q in 0..4 {
        let mut s = (acc[q][0] + acc[q][1]) + (acc[q][2] + acc[q][3]);
        for i in chunks * 4..a.len() {
            s += a[i] * b[q][i];
        }
        out[q] = s;
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four lanes keep the reduction order fixed while letting it vectorize.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (n, m) = require_matrix("transpose", a)?;
    let d = a.data();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = d[i * m + j];
        }
    }
    Tensor::matrix(m, n, out)
}

fn zip_same(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("add", a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|v| v * c)
}

/// Adds `row` (length = column count) to every row of `a`.
pub fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    let cols = a.cols();
    if row.len() != cols {
        return Err(Error::shape("add_row", a.shape(), row.shape()));
    }
    let mut out = a.clone();
    let r = row.data();
    for chunk in out.data_mut().chunks_mut(cols) {
        for (o, &b) in chunk.iter_mut().zip(r) {
            *o += b;
        }
    }
    Ok(out)
}

/// Column sums of a matrix.
pub fn sum_rows(a: &Tensor) -> Tensor {
    let cols = a.cols();
    let mut out = vec![0.0; cols];
    for chunk in a.data().chunks(cols) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact gelu, `x·Φ(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| v * normal_cdf(v))
}

pub(crate) fn gelu_derivative(v: f64) -> f64 {
    normal_cdf(v) + v * normal_pdf(v)
}

/// Splits a shape around `axis` into (outer, axis length, inner) strides.
fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Contract(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, max-shifted for stability.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split("softmax", x.shape(), axis)?;
    if !x.all_finite() {
        return Err(Error::NonFinite("softmax"));
    }
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let max = (0..len).map(|a| d[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for a in 0..len {
                let e = (d[idx(a)] - max).exp();
                out[idx(a)] = e;
                total += e;
            }
            for a in 0..len {
                out[idx(a)] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Row-wise log-softmax of a matrix.
pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let cols = x.cols();
    if !x.all_finite() {
        return Err(Error::NonFinite("log_softmax"));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for v in row {
            *v -= lse;
        }
    }
    Ok(out)
}

/// Output of [`layer_norm`] together with the statistics its gradient needs.
pub struct LayerNormOut {
    pub y: Tensor,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Normalizes each row over the last axis, then applies `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<LayerNormOut> {
    let d = *x.shape().last().unwrap();
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    if eps <= 0.0 {
        return Err(Error::Contract("layer_norm: eps must be positive".into()));
    }
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    let (g, b) = (gain.data(), bias.data());
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            y[r * d + j] = h * g[j] + b[j];
        }
    }
    Ok(LayerNormOut {
        y: Tensor::new(x.shape().to_vec(), y)?,
        xhat,
        inv_std,
    })
}

/// Output length of a valid (unpadded) strided convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    if len < kernel || stride == 0 {
        None
    } else {
        Some((len - kernel) / stride + 1)
    }
}

/// Unfolds `x: C×L` into `L'×(C·K)` patches.
pub(crate) fn im2col(x: &Tensor, kernel: usize, stride: usize, out_len: usize) -> Tensor {
    let (c_in, len) = (x.shape()[0], x.shape()[1]);
    let d = x.data();
    let width = c_in * kernel;
    let mut cols = vec![0.0; out_len * width];
    for t in 0..out_len {
        let start = t * stride;
        for c in 0..c_in {
            let src = &d[c * len + start..c * len + start + kernel];
            cols[t * width + c * kernel..t * width + (c + 1) * kernel].copy_from_slice(src);
        }
    }
    Tensor::matrix(out_len, width, cols).expect("im2col shape")
}

/// Scatters patch gradients back onto the input layout; inverse of [`im2col`].
pub(crate) fn col2im(cols: &Tensor, c_in: usize, len: usize, kernel: usize, stride: usize) -> Tensor {
    let out_len = cols.shape()[0];
    let width = c_in * kernel;
    let mut x = vec![0.0; c_in * len];
    let d = cols.data();
    for t in 0..out_len {
        let start = t * stride;
        for c in 0..c_in {
            for k in 0..kernel {
                x[c * len + start + k] += d[t * width + c * kernel + k];
            }
        }
    }
    Tensor::matrix(c_in, len, x).expect("col2im shape")
}

/// Cross-correlation of `x: C_in×L` with `weight: C_out×C_in×K` plus a bias
/// per output channel, producing `C_out×L'`.
pub fn conv1d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (c_in, len) = require_matrix("conv1d", x)?;
    if weight.rank() != 3 || weight.shape()[1] != c_in || bias.len() != weight.shape()[0] {
        return Err(Error::shape("conv1d", x.shape(), weight.shape()));
    }
    let (c_out, kernel) = (weight.shape()[0], weight.shape()[2]);
    let out_len = conv_out_len(len, kernel, stride).ok_or(Error::Length {
        op: "conv1d",
        len,
        min: kernel,
    })?;
    let cols = im2col(x, kernel, stride, out_len);
    let w = Tensor::matrix(c_out, c_in * kernel, weight.data().to_vec())?;
    // (C_out × CK) · (L' × CK)ᵀ
    let mut out = matmul_a_bt(&w, &cols)?;
    let b = bias.data();
    for (o, row) in out.data_mut().chunks_mut(out_len).enumerate() {
        for v in row {
            *v += b[o];
        }
    }
    Ok(out)
}

/// Columns `[start, start + width)` of a matrix.
pub fn slice_cols(x: &Tensor, start: usize, width: usize) -> Result<Tensor> {
    let (n, m) = require_matrix("slice_cols", x)?;
    if width == 0 || start + width > m {
        return Err(Error::Contract(format!(
            "slice_cols: [{start}, {}) outside {m} columns",
            start + width
        )));
    }
    let mut out = Vec::with_capacity(n * width);
    for r in 0..n {
        out.extend_from_slice(&x.data()[r * m + start..r * m + start + width]);
    }
    Tensor::matrix(n, width, out)
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let n = parts.first().map(|p| p.rows()).unwrap_or(0);
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (rows, cols) = require_matrix("concat_cols", p)?;
        if rows != n {
            return Err(Error::shape("concat_cols", parts[0].shape(), p.shape()));
        }
        widths.push(cols);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(n * total);
    for r in 0..n {
        for p in parts {
            out.extend_from_slice(p.row(r));
        }
    }
    Tensor::matrix(n, total, out)
}

/// Rows `[start, start + count)` of a matrix.
pub fn slice_rows(x: &Tensor, start: usize, count: usize) -> Result<Tensor> {
    let (n, m) = require_matrix("slice_rows", x)?;
    if count == 0 || start + count > n {
        return Err(Error::Length {
            op: "slice_rows",
            len: n,
            min: start + count,
        });
    }
    Tensor::matrix(count, m, x.data()[start * m..(start + count) * m].to_vec())
}
