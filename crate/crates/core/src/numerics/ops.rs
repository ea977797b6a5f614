use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MIN_NORM: f64 = 1e-12;

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| {
        let d = *x - *y;
        acc + d * d
    })
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
///
/// Either norm below `1e-12` is a [`Error::DegenerateVector`]; callers pick the fallback.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Domain(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = norm(a);
    let nb = norm(b);
    let min = T::lit(MIN_NORM);
    if !(na > min) || !(nb > min) {
        return Err(Error::DegenerateVector {
            norm: na.min(nb).to_f64_lossy(),
        });
    }
    Ok((dot(a, b) / (na * nb)).max(-T::one()).min(T::one()))
}

/// Max-shifted softmax.
pub fn softmax<T: Scalar>(v: &[T]) -> Vec<T> {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = v.iter().map(|x| (*x - max).exp()).collect();
    let sum = out.iter().fold(T::zero(), |a, b| a + *b);
    for o in &mut out {
        *o /= sum;
    }
    out
}

pub fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let sum = v.iter().fold(T::zero(), |a, x| a + (*x - max).exp());
    max + sum.ln()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, x) in v.iter().enumerate() {
        match best {
            Some((_, b)) if *x <= b => {}
            _ => best = Some((i, *x)),
        }
    }
    best.map(|(i, _)| i)
}

/// Gradient of `x / ‖x‖` contracted with `upstream`: `(upstream - x̂ (x̂·upstream)) / ‖x‖`.
pub(crate) fn normalize_backward<T: Scalar>(unit: &[T], norm: T, upstream: &[T]) -> Vec<T> {
    let proj = dot(unit, upstream);
    unit.iter()
        .zip(upstream)
        .map(|(u, g)| (*g - *u * proj) / norm)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        assert!(
            (cosine_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0f64).abs() < 1e-15
        );
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let c: f64 = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector { .. })
        ));
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn softmax_and_sigmoid() {
        let s = softmax(&[2.0; 5]);
        assert!(s.iter().all(|p| (*p - 0.2f64).abs() < 1e-15));
        assert_eq!(sigmoid(0.0f64), 0.5);
        let big = softmax(&[1000.0, 1000.0, -1000.0]);
        assert!((big[0] - 0.5f64).abs() < 1e-12 && big[2] == 0.0);
        let direct: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let z: f64 = direct.iter().sum();
        for (a, b) in softmax(&[1.0, 2.0, 3.0]).iter().zip(&direct) {
            assert!((a - b / z).abs() < 1e-12);
        }
        assert!((sigmoid(-800.0f64)).is_finite());
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax::<f64>(&[]), None);
    }
}
