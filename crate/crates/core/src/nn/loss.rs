use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax of `[N, K]` logits with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = logits.matrix_dims()?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(logits.shape(), out)
}

/// Mean cross-entropy and its gradient `(softmax - onehot) / N`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.matrix_dims()?;
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Domain(format!("label {bad} outside [0, {k})")));
    }
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    for (i, (row, &label)) in logits.data().chunks(k).zip(labels).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_total = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += log_total - (row[label] - max);
        for (j, &v) in row.iter().enumerate() {
            let p = (v - max - log_total).exp();
            grad[i * k + j] = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::new(&[n, k], grad)?))
}
