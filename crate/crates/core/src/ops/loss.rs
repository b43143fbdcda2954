use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean softmax cross-entropy over the batch. Returns the loss and
/// `(softmax - onehot) / B`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let [batch, classes] = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != batch {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for batch of {batch}", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let inv_b = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(batch * classes);
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        loss += total.ln() - (row[label].to_f64() - max);
        for (j, e) in exps.iter().enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad.push(T::from_f64((e / total - onehot) * inv_b));
        }
    }
    Ok((loss * inv_b, Tensor::new(vec![batch, classes], grad)?))
}
