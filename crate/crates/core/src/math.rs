//! Shared numeric helpers for the heads and the toy encoder.

use ndarray::{Array1, ArrayView1, ArrayViewMut1};

/// Numerically stable log(sum(exp(x))).
pub fn log_sum_exp(logits: ArrayView1<f64>) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = logits.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Stable softmax of a logit vector.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|x| (x - m).exp());
    let s = out.sum();
    out.mapv_inplace(|x| x / s);
    out
}

/// In-place softmax over a mutable row.
pub fn softmax_inplace(mut row: ArrayViewMut1<f64>) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    row.mapv_inplace(|x| (x - m).exp());
    let s = row.sum();
    row.mapv_inplace(|x| x / s);
}

/// Cross-entropy -log p[target] computed from logits without forming
/// the probability vector.
pub fn cross_entropy_from_logits(logits: ArrayView1<f64>, target: usize) -> f64 {
    log_sum_exp(logits) - logits[target]
}

/// Gradient of a row softmax: given y = softmax(x) and dL/dy, returns
/// dL/dx = y * (dy - sum(dy * y)).
pub fn softmax_backward_row(y: ArrayView1<f64>, dy: ArrayView1<f64>) -> Array1<f64> {
    let dot: f64 = y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
    let mut out = Array1::zeros(y.len());
    for k in 0..y.len() {
        out[k] = y[k] * (dy[k] - dot);
    }
    out
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for k in 1..values.len() {
        if values[k] > values[best] {
            best = k;
        }
    }
    best
}
