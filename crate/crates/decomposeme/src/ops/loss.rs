//! Softmax cross-entropy classification loss.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean over the batch of `-log softmax(logits)[label]`, computed with
/// max-subtraction for stability. Each sample of `logits` is flattened
/// to the class axis. Returns the loss and the gradient with respect to
/// the logits, `(softmax - onehot) / N`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let n = logits.batch();
    let k = logits.sample_len();
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for a batch of {n} samples",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!(
            "label {bad} is outside [0, {k})"
        )));
    }

    let mut grad = Tensor::zeros(logits.shape()[0], logits.shape()[1], logits.shape()[2], logits.shape()[3]);
    let mut total = 0.0f64;
    let inv_n = 1.0 / n as f64;
    for ni in 0..n {
        let row = logits.sample(ni);
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut denom = 0.0f64;
        for &z in row {
            denom += f64::from(z - max).exp();
        }
        let log_denom = denom.ln();
        total += log_denom - f64::from(row[labels[ni]] - max);
        let g = grad.sample_mut(ni);
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = ((f64::from(z - max).exp() / denom) * inv_n) as f32;
        }
        g[labels[ni]] -= inv_n as f32;
    }
    Ok((total * inv_n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_cost_ln_k() {
        let logits = Tensor::full([4, 10, 1, 1], 0.37);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 3, 5, 9]).unwrap();
        assert!((loss - 10.0f64.ln()).abs() < 1e-6);
        assert!((loss - 2.302585).abs() < 1e-5);
    }

    #[test]
    fn saturated_correct_logit_costs_nothing() {
        let mut logits = Tensor::zeros(1, 10, 1, 1);
        logits.set(0, 2, 0, 0, 1000.0);
        let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = Tensor::zeros(1, 3, 1, 1);
        let err = softmax_cross_entropy(&logits, &[3]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor::from_vec(
            [8, 10, 1, 1],
            (0..80).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..8).map(|_| rng.gen_range(0..10)).collect();
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        for ni in 0..8 {
            let s: f64 = grad.sample(ni).iter().map(|&v| f64::from(v)).sum();
            assert!(s.abs() < 1e-7);
        }
    }
}
