use crate::error::{Error, Result};

use super::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor) -> Tensor {
    let classes = logits.row_len().max(1);
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(classes) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f32 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    Tensor::new(logits.shape().to_vec(), out).expect("softmax keeps shape")
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy over the batch and its gradient `(softmax − onehot)/B`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<(f32, Tensor)> {
    let batch = labels.len();
    if logits.shape() != [batch, NUM_CLASSES] {
        return Err(Error::ShapeMismatch {
            layer: 0,
            expected: vec![batch, NUM_CLASSES],
            found: logits.shape().to_vec(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::LabelOutOfRange(bad));
    }
    let mut grad = Vec::with_capacity(logits.len());
    let mut total = 0.0f64;
    let scale = 1.0 / batch as f32;
    for (row, &label) in logits.data().chunks_exact(NUM_CLASSES).zip(labels) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
        let log_sum = sum.ln() + max;
        total += f64::from(log_sum - row[label as usize]);
        for (i, v) in row.iter().enumerate() {
            let p = (v - log_sum).exp();
            let target = if i == label as usize { 1.0 } else { 0.0 };
            grad.push((p - target) * scale);
        }
    }
    let loss = if batch == 0 { 0.0 } else { (total / batch as f64) as f32 };
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad).expect("grad shape")))
}
