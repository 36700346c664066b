use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scalar loss with optional per-sample breakdown.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub scalar: f64,
    pub per_sample: Option<Vec<f64>>,
}

fn check(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let batch = logits.batch();
    if batch == 0 {
        return Err(Error::EmptyBatch);
    }
    let classes = logits.sample_len();
    if labels.len() != batch {
        return Err(Error::CountMismatch { images: batch, labels: labels.len() });
    }
    for &y in labels {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
    }
    Ok((batch, classes))
}

/// Mean softmax cross-entropy over the batch.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<LossValue> {
    let (batch, classes) = check(logits, labels)?;
    let mut per_sample = Vec::with_capacity(batch);
    for b in 0..batch {
        let row = &logits.data()[b * classes..][..classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        per_sample.push(lse - row[labels[b]]);
    }
    let scalar = per_sample.iter().sum::<f64>() / batch as f64;
    Ok(LossValue { scalar, per_sample: Some(per_sample) })
}

/// Gradient of the mean cross-entropy with respect to the logits:
/// `(softmax - onehot) / batch`.
pub fn cross_entropy_grad(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (batch, classes) = check(logits, labels)?;
    let mut g = vec![0.0; logits.len()];
    for b in 0..batch {
        let row = &logits.data()[b * classes..][..classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let out = &mut g[b * classes..][..classes];
        for (o, v) in out.iter_mut().zip(row) {
            *o = (v - max).exp() / denom;
        }
        out[labels[b]] -= 1.0;
        for o in out.iter_mut() {
            *o /= batch as f64;
        }
    }
    Ok(Tensor::from_vec(logits.shape(), g))
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let classes = logits.sample_len();
    let mut hits = 0usize;
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits.data()[b * classes..][..classes];
        let mut best = 0usize;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        if best == y {
            hits += 1;
        }
    }
    hits as f64 / labels.len().max(1) as f64
}
