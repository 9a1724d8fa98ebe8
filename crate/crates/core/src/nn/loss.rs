use super::layers::softmax_rows;
use super::tensor::{Real, Tensor};
use super::NnError;

/// Mean softmax cross-entropy over the batch. Returns the loss and its
/// gradient with respect to the logits: `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>), NnError> {
    let n = logits.batch();
    let k = logits.sample_len();
    if n != labels.len() || n == 0 {
        return Err(NnError::Shape(format!("{} labels for logits {:?}", labels.len(), logits.dims())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(NnError::Label { label: bad, classes: k });
    }
    let probs = softmax_rows(logits.data(), k);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    for (row, &label) in probs.chunks_exact(k).zip(labels) {
        // log-softmax from the logits directly for accuracy
        loss -= row[label].f64().max(f64::MIN_POSITIVE).ln();
        for (j, &p) in row.iter().enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad.push(T::of((p.f64() - onehot) / n as f64));
        }
    }
    Ok((loss / n as f64, Tensor::from_vec(logits.dims(), grad)?))
}

const PROB_FLOOR: f64 = 1e-7;

/// Mean binary cross-entropy on probabilities (e.g. a sigmoid output).
/// Probabilities are clamped to `[1e-7, 1 - 1e-7]`.
pub fn binary_cross_entropy<T: Real>(probs: &Tensor<T>, targets: &[f64]) -> Result<(f64, Tensor<T>), NnError> {
    let n = probs.len();
    if n != targets.len() || n == 0 {
        return Err(NnError::Shape(format!("{} targets for probabilities {:?}", targets.len(), probs.dims())));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (&p, &t) in probs.data().iter().zip(targets) {
        let p = p.f64().clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        grad.push(T::of((p - t) / (p * (1.0 - p)) / n as f64));
    }
    Ok((loss / n as f64, Tensor::from_vec(probs.dims(), grad)?))
}

/// Class probabilities from logits.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let n = logits.batch();
    let k = logits.sample_len();
    Tensor::from_vec(&[n, k], softmax_rows(logits.data(), k)).expect("same element count")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln2() {
        let logits = Tensor::<f64>::from_f64(&[1, 2], &[0.0, 0.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(grad.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let logits = Tensor::<f64>::from_f64(&[1, 2], &[40.0, -40.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn batch_of_two_mixed() {
        // Row 1: logits (1, 0) label 0 -> -ln(e/(e+1)); row 2: logits (0, 2) label 0 -> -ln(1/(1+e^2)).
        let logits = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 2.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 0]).unwrap();
        let e = std::f64::consts::E;
        let l1 = -(e / (e + 1.0)).ln();
        let l2 = -(1.0 / (1.0 + e * e)).ln();
        assert!((loss - (l1 + l2) / 2.0).abs() < 1e-12);
        let p1 = e / (e + 1.0);
        assert!((grad.data()[0] - (p1 - 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn bad_label_rejected() {
        let logits = Tensor::<f32>::zeros(&[1, 2]);
        assert!(matches!(softmax_cross_entropy(&logits, &[2]), Err(NnError::Label { .. })));
    }

    #[test]
    fn bce_gradient_through_sigmoid_is_p_minus_t() {
        let p = Tensor::<f64>::from_f64(&[2, 1], &[0.8, 0.3]).unwrap();
        let (_, g) = binary_cross_entropy(&p, &[1.0, 0.0]).unwrap();
        // chain with sigmoid' = p(1-p)
        let chained: Vec<f64> = g.data().iter().zip([0.8, 0.3]).map(|(g, p)| g * p * (1.0 - p)).collect();
        assert!((chained[0] - (0.8 - 1.0) / 2.0).abs() < 1e-12);
        assert!((chained[1] - 0.3 / 2.0).abs() < 1e-12);
    }
}
