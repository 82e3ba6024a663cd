//! Eager forward kernels. The tape records these and adds backward rules;
//! inference code calls them directly.

use super::special;
use super::Tensor;
use crate::error::{Error, Result};

/// Norms at or below this are treated as degenerate by `l2_normalize`.
pub const NORMALIZE_EPS: f64 = 1e-12;

pub(crate) fn matmul_raw(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(&b[l * n..(l + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// a: m×k, b: n×k → a·bᵀ (m×n).
pub(crate) fn matmul_nt_raw(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// a: m×n, b: m×k → aᵀ·b (n×k).
pub(crate) fn matmul_tn_raw(a: &[f64], m: usize, n: usize, b: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..m {
        let br = &b[i * k..(i + 1) * k];
        for (j, &av) in a[i * n..(i + 1) * n].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[j * k..(j + 1) * k].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[i * cols..(i + 1) * cols];
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

pub(crate) fn log_softmax_rows_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (d, &v) in out[i * cols..(i + 1) * cols].iter_mut().zip(row) {
            *d = v - lse;
        }
    }
    out
}

pub(crate) fn row_norms(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|i| {
            x[i * cols..(i + 1) * cols]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

pub(crate) fn l2_normalize_rows_raw(x: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    let norms = row_norms(x, rows, cols);
    let mut out = Vec::with_capacity(x.len());
    for (i, &norm) in norms.iter().enumerate() {
        if norm <= NORMALIZE_EPS {
            return Err(Error::Degenerate(format!(
                "row {i} has norm {norm:e}, cannot normalize"
            )));
        }
        out.extend(x[i * cols..(i + 1) * cols].iter().map(|v| v / norm));
    }
    Ok(out)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Tensor::matrix(m, n, matmul_raw(a.data(), m, k, b.data(), n))
}

pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().map(|&v| softplus_scalar(v)).collect(),
    )
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    Tensor::new(x.shape().to_vec(), softmax_rows_raw(x.data(), r, c))
}

/// Normalizes each row (or the whole rank-1 tensor) to unit Euclidean norm.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    Tensor::new(x.shape().to_vec(), l2_normalize_rows_raw(x.data(), r, c)?)
}

/// Elementwise ψ.
pub fn digamma(x: &Tensor) -> Result<Tensor> {
    let data = x
        .data()
        .iter()
        .map(|&v| special::digamma(v))
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(x.shape().to_vec(), data)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    dot(a, b) / (na * nb)
}
