use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Mean cross-entropy of a two-way softmax over `logits: [batch, 2]`,
/// evaluated with log-sum-exp. Returns the loss and its gradient with
/// respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.shape()[1] != 2 {
        return Err(Error::dim("softmax_cross_entropy", logits.shape(), &[labels.len(), 2]));
    }
    let batch = logits.shape()[0];
    if labels.len() != batch {
        return Err(Error::dim("softmax_cross_entropy labels", logits.shape(), &[labels.len()]));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Data(format!("label {bad} is not 0 or 1")));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &label) in logits.data().chunks(2).zip(labels) {
        let max = row[0].max(row[1]);
        let lse = max + ((row[0] - max).exp() + (row[1] - max).exp()).ln();
        loss += lse - row[label];
        for (k, &z) in row.iter().enumerate() {
            let p = (z - lse).exp();
            grad.push((p - if k == label { 1.0 } else { 0.0 }) / batch as f64);
        }
    }
    let loss = loss / batch as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy"));
    }
    Ok((loss, Tensor::new(vec![batch, 2], grad)?))
}
