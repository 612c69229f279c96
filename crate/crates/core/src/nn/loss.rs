//! Loss primitives. Each returns the batch-mean loss and its gradient with
//! respect to the logits it was given.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log Σ exp(row)`, stable.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let lse = log_sum_exp(logits.row(r));
        for v in out.row_mut(r) {
            *v -= lse;
        }
    }
    out
}

/// Mean of `-log softmax(logits)[label]`; gradient `(softmax - onehot) / n`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (n, c) = logits.shape();
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
    }
    if n == 0 {
        return Err(Error::shape("empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Label {
            label: bad,
            num_classes: c,
        });
    }
    let nf = n as f64;
    let mut loss = 0.0;
    let mut grad = softmax(logits);
    for (r, &y) in labels.iter().enumerate() {
        loss += log_sum_exp(logits.row(r)) - logits.get(r, y);
        grad.set(r, y, grad.get(r, y) - 1.0);
    }
    for v in grad.as_mut_slice() {
        *v /= nf;
    }
    Ok((loss / nf, grad))
}

/// Mean over rows of `KL(p_T ‖ p_S)` with `p = softmax(logits / T)`.
/// The teacher is a constant target; the gradient is w.r.t. the student
/// logits, scaled by `T²` so that magnitudes are temperature independent.
pub fn kl_divergence_t(student: &Matrix, teacher: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
    if student.shape() != teacher.shape() {
        return Err(Error::shape(format!(
            "student {:?} vs teacher {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    let (n, _) = student.shape();
    if n == 0 {
        return Err(Error::shape("empty batch"));
    }
    let nf = n as f64;
    let s = student.scale(1.0 / temperature);
    let t = teacher.scale(1.0 / temperature);
    let log_ps = log_softmax(&s);
    let log_pt = log_softmax(&t);
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(student.rows(), student.cols());
    for r in 0..n {
        for j in 0..student.cols() {
            let lpt = log_pt.get(r, j);
            let pt = lpt.exp();
            if pt > 0.0 {
                loss += pt * (lpt - log_ps.get(r, j));
            }
            grad.set(r, j, (log_ps.get(r, j).exp() - pt) * temperature / nf);
        }
    }
    Ok((loss / nf * temperature * temperature, grad))
}

pub fn kl_divergence(student: &Matrix, teacher: &Matrix) -> Result<(f64, Matrix)> {
    kl_divergence_t(student, teacher, 1.0)
}

/// `-Σ p log p` with `0 log 0 = 0`.
pub fn distribution_entropy(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Distribution("empty distribution".into()));
    }
    if let Some(bad) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
        return Err(Error::Distribution(format!("entry {bad} is not a probability")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Distribution(format!("entries sum to {total}")));
    }
    Ok(entropy_unchecked(probs))
}

pub(crate) fn entropy_unchecked(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// `log σ(s)` without overflow.
pub fn log_sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        -(-s).exp().ln_1p()
    } else {
        s - s.exp().ln_1p()
    }
}

pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use std::f64::consts::LN_2;

    #[test]
    fn uniform_two_class_cross_entropy_is_ln2() {
        let logits = Matrix::from_rows(&[vec![0.3, 0.3], vec![-1.0, -1.0]]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[0, 1]).unwrap();
        assert!((loss - LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_cross_entropy_vanishes() {
        let logits = Matrix::from_rows(&[vec![1e6, 0.0, 0.0]]).unwrap();
        let (loss, grad) = cross_entropy(&logits, &[0]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|g| g.abs() < 1e-300));
    }

    #[test]
    fn cross_entropy_matches_direct_summation() {
        // Oracle: -log(exp(z_y) / Σ exp(z_k)) evaluated naively (logits are moderate).
        let mut rng = stream(0, "ce", &[]);
        let logits = Matrix::random_normal(8, 10, &mut rng);
        let labels: Vec<usize> = (0..8).map(|i| (i * 7 + 3) % 10).collect();
        let mut oracle = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let denom: f64 = logits.row(r).iter().map(|v| v.exp()).sum();
            oracle += -(logits.get(r, y).exp() / denom).ln();
        }
        oracle /= 8.0;
        let (loss, _) = cross_entropy(&logits, &labels).unwrap();
        assert!((loss - oracle).abs() < 1e-10, "{loss} vs {oracle}");
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = Matrix::zeros(2, 3);
        assert!(matches!(
            cross_entropy(&logits, &[0, 3]),
            Err(Error::Label { label: 3, num_classes: 3 })
        ));
    }

    #[test]
    fn kl_of_identical_logits_is_zero() {
        let mut rng = stream(1, "kl", &[]);
        let z = Matrix::random_normal(5, 4, &mut rng);
        let (loss, grad) = kl_divergence(&z, &z).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn kl_point_mass_against_uniform_is_ln2() {
        let teacher = Matrix::from_rows(&[vec![1e3, -1e3]]).unwrap();
        let student = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let (loss, _) = kl_divergence(&student, &teacher).unwrap();
        assert!((loss - LN_2).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_on_random_pairs() {
        let mut rng = stream(0, "kl-gibbs", &[]);
        for _ in 0..1000 {
            let s = Matrix::random_normal(1, 6, &mut rng).scale(3.0);
            let t = Matrix::random_normal(1, 6, &mut rng).scale(3.0);
            assert!(kl_divergence(&s, &t).unwrap().0 >= 0.0);
        }
    }

    #[test]
    fn kl_shape_mismatch() {
        assert!(matches!(
            kl_divergence(&Matrix::zeros(2, 3), &Matrix::zeros(2, 4)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn entropy_closed_forms() {
        assert_eq!(distribution_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let u = vec![0.1; 10];
        assert!((distribution_entropy(&u).unwrap() - 10f64.ln()).abs() < 1e-12);
        let h = distribution_entropy(&[0.5, 0.25, 0.25]).unwrap();
        assert!((h - 1.5 * LN_2).abs() < 1e-15);
        assert!((h - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn entropy_rejects_invalid_distributions() {
        assert!(distribution_entropy(&[0.5, 0.6]).is_err());
        assert!(distribution_entropy(&[-0.1, 1.1]).is_err());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert_eq!(log_sigmoid(800.0), 0.0);
    }
}
