//! Scalar losses returning `(value, d value / d input)`.

use crate::Tensor;

/// Row-wise softmax over the flattened item of each batch entry.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let n = logits.item_len();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v as f64;
        }
        for v in row.iter_mut() {
            *v = (*v as f64 / sum) as f32;
        }
    }
    out
}

/// Mean categorical cross-entropy of softmax(logits) against integer labels.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let n = logits.batch();
    assert_eq!(n, labels.len(), "one label per batch item");
    let classes = logits.item_len();
    let mut grad = softmax(logits);
    let mut loss = 0.0f64;
    for (row, &y) in grad.data_mut().chunks_mut(classes).zip(labels) {
        loss -= (row[y].max(1e-30) as f64).ln();
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= n as f32;
        }
    }
    (loss / n as f64, grad)
}

/// `mean((x - target)^2)`.
pub fn mse_to_const(x: &Tensor, target: f32) -> (f64, Tensor) {
    let n = x.len().max(1) as f64;
    let loss = x
        .data()
        .iter()
        .map(|&v| {
            let d = (v - target) as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    let grad = x.map(|v| (2.0 * (v as f64 - target as f64) / n) as f32);
    (loss, grad)
}

/// `mean(|x - reference|)`; gradient with respect to `x` (sign, 0 at ties).
pub fn l1_mean(x: &Tensor, reference: &Tensor) -> (f64, Tensor) {
    assert_eq!(x.shape(), reference.shape(), "l1 operands must match");
    let n = x.len().max(1) as f64;
    let mut grad = x.clone();
    let mut loss = 0.0f64;
    for (g, &r) in grad.data_mut().iter_mut().zip(reference.data()) {
        let d = *g - r;
        loss += d.abs() as f64;
        *g = if d > 0.0 {
            (1.0 / n) as f32
        } else if d < 0.0 {
            (-1.0 / n) as f32
        } else {
            0.0
        };
    }
    (loss / n, grad)
}
