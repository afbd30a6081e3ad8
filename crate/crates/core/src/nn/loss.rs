use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Row-wise softmax of a `(B, Y)` logit tensor, computed in `f64`.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let y = logits.item_len();
    logits
        .data()
        .chunks_exact(y.max(1))
        .map(|row| {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / z).collect()
        })
        .collect()
}

/// Index of the largest logit per row (first one on ties).
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let y = logits.item_len();
    logits
        .data()
        .chunks_exact(y.max(1))
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax - onehot) / B` with respect to the logits.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let b = logits.batch();
    if logits.shape().len() != 2 {
        return Err(Error::input(format!("logits must be (B, Y), got {:?}", logits.shape())));
    }
    if labels.len() != b {
        return Err(Error::input(format!("{} labels for a batch of {b}", labels.len())));
    }
    let classes = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::input(format!("label {bad} out of range for {classes} classes")));
    }
    let probs = softmax(logits);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    let inv_b = 1.0 / b as f64;
    for (row, (p, &label)) in logits.data().chunks_exact(classes).zip(probs.iter().zip(labels)) {
        // log-sum-exp form keeps saturated logits exact
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        loss += lse - row[label].as_f64();
        for (j, &pj) in p.iter().enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad.push(T::from_f64((pj - onehot) * inv_b));
        }
    }
    Ok((loss * inv_b, Tensor::new(logits.shape().to_vec(), grad)?))
}
