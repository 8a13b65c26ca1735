//! Small dense helpers for the evaluation-only forward paths.

use crate::graphgrad::Tensor;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// y = W x for a [m, k] matrix tensor and k-vector.
pub(crate) fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let k = w.shape()[1];
    debug_assert_eq!(k, x.len());
    w.values().chunks_exact(k).map(|row| dot(row, x)).collect()
}

pub(crate) fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise log-softmax of a vector (single row).
pub(crate) fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}
