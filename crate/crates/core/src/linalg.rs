//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Cholesky factor of a symmetric positive definite matrix plus the diagonal
/// jitter that had to be added to obtain it.
#[derive(Clone, Debug)]
pub struct JitteredCholesky {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl JitteredCholesky {
    /// Factorizes `a`, adding `λ·mean(diag(a))` with λ escalating from 1e-8
    /// by factors of ten up to 1e-2 whenever the plain factorization fails.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        if let Some(chol) = Cholesky::new(a.clone()) {
            return Ok(Self { chol, jitter: 0.0 });
        }
        let n = a.nrows();
        let mean_diag = (a.diagonal().sum() / n as f64).abs().max(f64::MIN_POSITIVE);
        let mut lambda = 1e-8;
        while lambda <= 1e-2 * (1.0 + 1e-9) {
            let jitter = lambda * mean_diag;
            let mut aj = a.clone();
            for i in 0..n {
                aj[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(aj) {
                return Ok(Self { chol, jitter });
            }
            lambda *= 10.0;
        }
        Err(Error::Singular {
            jitter: 1e-2 * mean_diag,
        })
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// Solves `L x = b` for the lower factor.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("cholesky factor has a nonzero diagonal")
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Copies rows of a point matrix into owned vectors.
pub fn rows_of(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows())
        .map(|i| x.row(i).iter().copied().collect())
        .collect()
}

/// Builds an `n × d` point matrix from row vectors.
pub fn matrix_from_rows(rows: &[Vec<f64>], d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rescues_rank_deficient_matrix() {
        let a = DMatrix::from_element(3, 3, 1.0);
        let f = JitteredCholesky::new(&a).unwrap();
        assert!(f.jitter > 0.0 && f.jitter <= 1e-2);
    }

    #[test]
    fn indefinite_matrix_fails() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(JitteredCholesky::new(&a), Err(Error::Singular { .. })));
    }

    #[test]
    fn log_det_matches_product_of_eigenvalues() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let f = JitteredCholesky::new(&a).unwrap();
        assert!((f.log_det() - 11f64.ln()).abs() < 1e-12);
    }
}
