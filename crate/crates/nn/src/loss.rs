use crate::error::{NnError, Result};
use crate::tensor::Tensor;

/// Row-wise softmax of `[B, N]` logits, stabilised by max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let [_, n] = logits.dims2("softmax")?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(logits.shape(), out)
}

/// Mean cross-entropy over the batch and its gradient `(softmax - onehot) / B`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [b, n] = logits.dims2("cross entropy")?;
    if labels.len() != b {
        return Err(NnError::Shape(format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= n) {
        return Err(NnError::Label { label, classes: n });
    }
    let mut grad = vec![0.0; b * n];
    let mut loss = 0.0;
    for (i, (row, &y)) in logits.data().chunks(n).zip(labels).enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let log_z = z.ln() + m;
        loss += log_z - row[y];
        let g = &mut grad[i * n..(i + 1) * n];
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - log_z).exp() / b as f64;
        }
        g[y] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, Tensor::new(&[b, n], grad)?))
}
