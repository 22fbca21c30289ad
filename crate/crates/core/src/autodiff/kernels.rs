//! Dense `f64` kernels behind the graph primitives.

use std::f64::consts::PI;

/// `out[m, n] = a[m, k] @ b[k, n]` (overwrites `out`).
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    out[..m * n].fill(0.0);
    mm_acc(a, b, m, k, n, out);
}

/// `out[m, k] += g[m, n] @ b[k, n]^T`.
pub(crate) fn mm_nt_acc(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    let bt = transpose(b, k, n);
    mm_acc(g, &bt, m, n, k, out);
}

/// `out[k, n] += a[m, k]^T @ g[m, n]`.
pub(crate) fn mm_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let at = transpose(a, m, k);
    mm_acc(&at, g, k, m, n, out);
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

/// `out[m, n] += a[m, k] @ b[k, n]`, row by row as contiguous axpys.
fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
}

pub(crate) fn permute(src: &[f64], dims: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = dims.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * dims[i + 1];
    }
    let odims: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
    let ostrides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += ostrides[ax];
            if idx[ax] < odims[ax] {
                break;
            }
            off -= ostrides[ax] * odims[ax];
            idx[ax] = 0;
        }
    }
    (out, odims)
}

const GELU_C: f64 = 0.044_715;

fn gelu_k() -> f64 {
    (2.0 / PI).sqrt()
}

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    let u = gelu_k() * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let k = gelu_k();
    let t = (k * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
