use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, softmax};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionLoss<T> {
    pub value: T,
    /// `∂value/∂logits`, one row per proposal.
    pub grads: Vec<Vec<T>>,
}

/// Mean softmax cross-entropy over proposals; an empty batch has loss 0.
pub fn detection_loss<T: Scalar>(logits: &[Vec<T>], targets: &[usize]) -> Result<DetectionLoss<T>> {
    if logits.len() != targets.len() {
        return Err(Error::Domain(format!(
            "{} logit rows but {} targets",
            logits.len(),
            targets.len()
        )));
    }
    if logits.is_empty() {
        return Ok(DetectionLoss {
            value: T::zero(),
            grads: Vec::new(),
        });
    }
    let n = T::from_usize_lossy(logits.len());
    let mut value = T::zero();
    let mut grads = Vec::with_capacity(logits.len());
    for (row, &t) in logits.iter().zip(targets) {
        if t >= row.len() {
            return Err(Error::Domain(format!(
                "target {t} outside {} classes",
                row.len()
            )));
        }
        value += log_sum_exp(row) - row[t];
        let mut g = softmax(row);
        g[t] -= T::one();
        grads.push(g.into_iter().map(|v| v / n).collect());
    }
    Ok(DetectionLoss {
        value: value / n,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let l = detection_loss(&[vec![0.3f64; 4], vec![-2.0; 4]], &[0, 3]).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_tends_to_zero() {
        let l = detection_loss(&[vec![50.0f64, -50.0, -50.0]], &[0]).unwrap();
        assert!(l.value < 1e-40);
        let e = detection_loss::<f64>(&[], &[]).unwrap();
        assert_eq!(e.value, 0.0);
        assert!(detection_loss(&[vec![1.0f64]], &[1]).is_err());
    }

    #[test]
    fn f32_matches_f64() {
        let a = detection_loss(&[vec![0.1f32, 0.7, -0.3]], &[2]).unwrap();
        let b = detection_loss(&[vec![0.1f64, 0.7, -0.3]], &[2]).unwrap();
        assert!((a.value as f64 - b.value).abs() < 1e-6);
    }
}
