use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, c) = logits.dims2()?;
    ensure!(labels.len() == n, Dimension, "{} labels for {n} rows of logits", labels.len());
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(crate::Error::Data(format!("label {bad} is outside 0..{c}")));
    }
    Ok((n, c))
}

/// Row-wise softmax, shifted by the row maximum.
fn softmax_row<T: Scalar>(row: &[T]) -> (Vec<T>, T) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
    let s: T = e.iter().copied().sum();
    (e.into_iter().map(|v| v / s).collect(), mx + s.ln())
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy_fwd<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (n, c) = check(logits, labels)?;
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        let (_, lse) = softmax_row(row);
        total += (lse - row[y]).as_f64();
    }
    Ok(total / n as f64)
}

/// `(softmax − onehot) / N`.
pub fn cross_entropy_bwd<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (n, c) = check(logits, labels)?;
    let inv = T::lit(1.0 / n as f64);
    let mut g = Vec::with_capacity(n * c);
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        let (p, _) = softmax_row(row);
        g.extend(p.into_iter().enumerate().map(|(j, v)| (if j == y { v - T::one() } else { v }) * inv));
    }
    Tensor::new(vec![n, c], g)
}

/// Loss, gradient and number of correct arg-max predictions.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>, usize)> {
    Ok((cross_entropy_fwd(logits, labels)?, cross_entropy_bwd(logits, labels)?, correct(logits, labels)?))
}

/// Predictions are the first index of the row maximum.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (_, c) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks(c)
        .map(|row| row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best }))
        .collect())
}

pub fn correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    check(logits, labels)?;
    Ok(argmax_rows(logits)?.iter().zip(labels).filter(|(p, y)| p == y).count())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{check_param, GradOpts};

    #[test]
    fn uniform_logits_give_ln_c() {
        let x = Tensor::full(&[4, 10], 0.37);
        let l = cross_entropy_fwd(&x, &[0, 3, 9, 5]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn confident_correct_logit_gives_zero_loss() {
        let x = Tensor::new(vec![1, 3], vec![0.0, 800.0, -5.0]).unwrap();
        assert!(cross_entropy_fwd(&x, &[1]).unwrap() < 1e-300);
        let bad = cross_entropy_fwd(&x, &[0]).unwrap();
        assert!((bad - 800.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = Tensor::uniform(&[5, 7], -3.0, 3.0, &mut ChaCha8Rng::seed_from_u64(2));
        let y = [0, 6, 3, 3, 1];
        let g = cross_entropy_bwd(&x, &y).unwrap();
        let r = check_param("logits", &x, &g, |t| t, |t| cross_entropy_fwd(t, &y).unwrap(), &GradOpts::default());
        assert!(r.rel_err <= 1e-7, "{r}");
    }

    #[test]
    fn out_of_range_label_is_a_data_error() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(cross_entropy_fwd(&x, &[0, 3]), Err(crate::Error::Data(_))));
        assert!(matches!(cross_entropy_bwd(&x, &[0]), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn counts_correct_predictions() {
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.5]).unwrap();
        assert_eq!(argmax_rows(&x).unwrap(), [1, 0, 0]);
        assert_eq!(correct(&x, &[1, 1, 0]).unwrap(), 2);
    }
}
