use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax - onehot) / batch`. Arithmetic runs in `f64`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (losses, grad) = softmax_terms(logits, labels, true)?;
    let b = losses.len();
    if b == 0 {
        return Ok((0.0, grad));
    }
    Ok((losses.iter().sum::<f64>() / b as f64, grad))
}

/// Per-sample cross-entropy and the unscaled gradient `softmax - onehot`
/// of each sample's own loss.
pub fn cross_entropy_per_sample(logits: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
    softmax_terms(logits, labels, false)
}

fn softmax_terms(logits: &Tensor, labels: &[usize], mean: bool) -> Result<(Vec<f64>, Tensor)> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!(
            "cross entropy needs (batch, classes) logits, got {:?}",
            logits.shape()
        )));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::shape(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    logits.check_finite()?;
    let mut grad = Tensor::zeros(vec![b, k]);
    let mut losses = Vec::with_capacity(b);
    let scale = if mean && b > 0 { 1.0 / b as f64 } else { 1.0 };
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        losses.push(sum.ln() - (row[y] as f64 - max));
        for (j, (g, e)) in grad.row_mut(i).iter_mut().zip(&exps).enumerate() {
            let p = e / sum - if j == y { 1.0 } else { 0.0 };
            *g = (p * scale) as f32;
        }
    }
    Ok((losses, grad))
}

/// Per-sample predicted class (first maximum on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.batch())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
