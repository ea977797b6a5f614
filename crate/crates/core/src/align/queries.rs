use crate::align::sinkhorn::AssignmentMatrix;
use crate::error::{Error, Result};
use crate::numerics::argmax;

/// Query features with their per-class logits; labels are the argmax class.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBatch {
    pub features: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl QueryBatch {
    /// Labels are `argmax sigmoid(logit)`, i.e. the argmax logit (ties to the lowest class).
    pub fn new(features: Vec<Vec<f64>>, logits: Vec<Vec<f64>>) -> Result<Self> {
        if features.len() != logits.len() {
            return Err(Error::Domain("features and logits differ in length".into()));
        }
        let labels = logits
            .iter()
            .map(|l| argmax(l).ok_or_else(|| Error::Domain("empty logit row".into())))
            .collect::<Result<_>>()?;
        Ok(Self {
            features,
            logits,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Rows labeled `class`, in order, with their batch indices.
pub fn collect_class_queries(batch: &QueryBatch, class: usize) -> (Vec<usize>, Vec<Vec<f64>>) {
    batch
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == class)
        .map(|(i, _)| (i, batch.features[i].clone()))
        .unzip()
}

/// `p_k = Σ_i A_ik q_i / Σ_i A_ik`; components without mass are `None`.
pub fn aggregate_prototypes(
    queries: &[Vec<f64>],
    a: &AssignmentMatrix,
) -> Result<Vec<Option<Vec<f64>>>> {
    if queries.len() != a.rows {
        return Err(Error::Domain(format!(
            "{} queries but assignment has {} rows",
            queries.len(),
            a.rows
        )));
    }
    let dim = queries.first().map_or(0, Vec::len);
    let mass = a.col_sums();
    Ok((0..a.cols)
        .map(|k| {
            if !(mass[k] > 0.0) {
                return None;
            }
            let mut p = vec![0.0; dim];
            for (i, q) in queries.iter().enumerate() {
                let w = a.get(i, k) / mass[k];
                for (pv, qv) in p.iter_mut().zip(q) {
                    *pv += w * qv;
                }
            }
            Some(p)
        })
        .collect())
}

/// Adjoint of [`aggregate_prototypes`] with `A` held constant.
pub fn aggregate_backward(
    grads: &[Option<Vec<f64>>],
    a: &AssignmentMatrix,
    dim: usize,
) -> Vec<Vec<f64>> {
    let mass = a.col_sums();
    let mut out = vec![vec![0.0; dim]; a.rows];
    for (k, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        if !(mass[k] > 0.0) {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            let w = a.get(i, k) / mass[k];
            for (ov, gv) in o.iter_mut().zip(g) {
                *ov += w * gv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_argmax() {
        let b = QueryBatch::new(
            vec![vec![1.0], vec![2.0], vec![3.0]],
            vec![vec![0.1, 0.9], vec![2.0, -1.0], vec![0.5, 0.5]],
        )
        .unwrap();
        assert_eq!(b.labels, vec![1, 0, 0]);
        let (idx, q) = collect_class_queries(&b, 0);
        assert_eq!(idx, vec![1, 2]);
        assert_eq!(q, vec![vec![2.0], vec![3.0]]);
        assert!(collect_class_queries(&b, 5).0.is_empty());
    }

    #[test]
    fn uniform_and_one_hot_weights() {
        let q = vec![vec![1.0, 2.0], vec![3.0, -2.0], vec![5.0, 0.0]];
        let uni = AssignmentMatrix::from_rows(vec![vec![0.5, 0.5]; 3]).unwrap();
        let p = aggregate_prototypes(&q, &uni).unwrap();
        assert_eq!(p[0], Some(vec![3.0, 0.0]));
        assert_eq!(p[1], Some(vec![3.0, 0.0]));
        let hot = AssignmentMatrix::from_rows(vec![
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
        ])
        .unwrap();
        let p = aggregate_prototypes(&q, &hot).unwrap();
        assert_eq!(p, vec![Some(vec![2.0, 0.0]), Some(vec![5.0, 0.0]), None]);
    }
}
