use super::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-wise softmax of `[batch, classes]` logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let &[_, classes] = logits.shape() else {
        return Err(NnError::Shape(format!(
            "logits must be [batch, classes], got {:?}",
            logits.shape()
        )));
    };
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(classes) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&z| (z - m).exp()));
        let sum: T = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|p| *p = *p / sum);
    }
    Ok(Tensor::from_vec(logits.shape(), out)?)
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let probs = softmax(logits)?;
    let classes = logits.shape()[1];
    let batch = logits.shape()[0];
    if labels.len() != batch {
        return Err(NnError::Shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(NnError::Label { label, classes });
    }
    let bt = T::from_usize(batch).expect("batch fits");
    let tiny = T::min_positive_value();
    let mut loss = T::zero();
    let mut grad = probs.into_data();
    for (row, &label) in grad.chunks_exact_mut(classes).zip(labels) {
        // `max` would swallow a NaN probability, so pass it through.
        let p = row[label];
        loss = loss - if p.is_nan() { p } else { p.max(tiny).ln() };
        row[label] = row[label] - T::one();
        row.iter_mut().for_each(|g| *g = *g / bt);
    }
    Ok((loss / bt, Tensor::from_vec(logits.shape(), grad)?))
}
