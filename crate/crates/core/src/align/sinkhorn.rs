use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::log_sum_exp;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornConfig {
    /// Entropic scale: the kernel is `exp(init / eps)`.
    pub eps: f64,
    pub max_iter: usize,
    /// Largest tolerated row-marginal violation after a sweep.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            eps: 0.05,
            max_iter: 10_000,
            tol: 1e-9,
        }
    }
}

/// Soft assignment of `rows` queries to `cols` components, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_violation: f64,
}

impl AssignmentMatrix {
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.cols + k]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .map(|r| r.iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in self.data.chunks_exact(self.cols) {
            for (a, v) in s.iter_mut().zip(r) {
                *a += v;
            }
        }
        s
    }

    /// Wraps an explicit matrix (no marginal guarantees).
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Domain(
                "assignment rows must share a positive width".into(),
            ));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
            converged: false,
            iterations: 0,
            max_violation: f64::NAN,
        })
    }
}

/// Sinkhorn–Knopp in the log domain: rows normalized to 1, then columns scaled
/// to `rows / cols`, until the row marginals are within `tol`.
pub fn sinkhorn_assign(
    init: &[f64],
    rows: usize,
    cols: usize,
    cfg: &SinkhornConfig,
) -> Result<AssignmentMatrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Domain(
            "Sinkhorn needs at least one row and one column".into(),
        ));
    }
    if init.len() != rows * cols {
        return Err(Error::Domain(format!(
            "init has {} entries, expected {rows}x{cols}",
            init.len()
        )));
    }
    if init.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Sinkhorn init".into()));
    }
    if !(cfg.eps > 0.0) {
        return Err(Error::Domain(format!("eps {} must be positive", cfg.eps)));
    }
    let mut log_a: Vec<f64> = init.iter().map(|v| v / cfg.eps).collect();
    let peak = log_a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    log_a.iter_mut().for_each(|v| *v -= peak);
    let log_col_target = (rows as f64 / cols as f64).ln();
    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    let mut column = vec![0.0; rows];
    while iterations < cfg.max_iter.max(1) {
        iterations += 1;
        for r in log_a.chunks_exact_mut(cols) {
            let z = log_sum_exp(r);
            r.iter_mut().for_each(|v| *v -= z);
        }
        for k in 0..cols {
            for i in 0..rows {
                column[i] = log_a[i * cols + k];
            }
            let shift = log_col_target - log_sum_exp(&column);
            for i in 0..rows {
                log_a[i * cols + k] += shift;
            }
        }
        violation = log_a
            .chunks_exact(cols)
            .map(|r| (r.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        if violation < cfg.tol {
            break;
        }
    }
    Ok(AssignmentMatrix {
        rows,
        cols,
        data: log_a.iter().map(|v| v.exp()).collect(),
        converged: violation < cfg.tol,
        iterations,
        max_violation: violation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn constant_init_is_uniform_after_one_sweep() {
        let a = sinkhorn_assign(&[0.3; 12], 4, 3, &SinkhornConfig::default()).unwrap();
        assert!(a.converged);
        assert_eq!(a.iterations, 1);
        assert!(a.data.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn single_column_is_all_ones() {
        let a = sinkhorn_assign(&[0.1, -2.0, 5.0], 3, 1, &SinkhornConfig::default()).unwrap();
        assert!(a.data.iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn random_init_balances() {
        let mut rng = Rng::new(4, 5);
        let init: Vec<f64> = (0..24).map(|_| rng.normal()).collect();
        let a = sinkhorn_assign(&init, 8, 3, &SinkhornConfig::default()).unwrap();
        assert!(a.converged);
        for s in a.row_sums() {
            assert!((s - 1.0).abs() < 1e-9);
        }
        for s in a.col_sums() {
            assert!((s - 8.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = SinkhornConfig::default();
        assert!(sinkhorn_assign(&[], 0, 2, &cfg).is_err());
        assert!(sinkhorn_assign(&[f64::NAN, 0.0], 1, 2, &cfg).is_err());
        assert!(sinkhorn_assign(&[0.0; 3], 1, 2, &cfg).is_err());
    }
}
