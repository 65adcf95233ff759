//! Cholesky factorization for the symmetric positive-definite systems that
//! appear in the log-det rate terms. Log-determinants come from the factor
//! diagonal, which avoids overflow in the determinant itself.

use super::DenseMatrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower-triangular Cholesky factor `A = L L^T`.
#[derive(Debug, Clone)]
pub struct Cholesky<S> {
    l: DenseMatrix<S>,
}

impl<S: Scalar> Cholesky<S> {
    /// Factors a symmetric positive-definite matrix.
    pub fn new(a: &DenseMatrix<S>) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::DimensionMismatch("cholesky of non-square".into()));
        }
        let mut l = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let mut diag = a.get(j, j);
            for k in 0..j {
                let v = l.get(j, k);
                diag -= v * v;
            }
            if diag <= S::zero() || !diag.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "non-positive pivot {diag} at column {j}; matrix not positive definite"
                )));
            }
            let djj = diag.sqrt();
            l.set(j, j, djj);
            let inv = S::one() / djj;
            for i in (j + 1)..n {
                let mut v = a.get(i, j);
                for k in 0..j {
                    v -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, v * inv);
            }
        }
        Ok(Self { l })
    }

    /// `log det A = 2 Σ log L_jj`.
    pub fn log_det(&self) -> S {
        let n = self.l.rows();
        let mut acc = S::zero();
        for j in 0..n {
            acc += self.l.get(j, j).ln();
        }
        acc + acc
    }

    /// Solves `A X = B` for X.
    pub fn solve(&self, b: &DenseMatrix<S>) -> Result<DenseMatrix<S>> {
        let n = self.l.rows();
        if b.rows() != n {
            return Err(Error::DimensionMismatch("cholesky solve rhs".into()));
        }
        let mut x = b.clone();
        for c in 0..x.cols() {
            let col = x.col_mut(c);
            // Forward: L y = b
            for i in 0..n {
                let mut v = col[i];
                for k in 0..i {
                    v -= self.l.get(i, k) * col[k];
                }
                col[i] = v / self.l.get(i, i);
            }
            // Backward: L^T x = y
            for i in (0..n).rev() {
                let mut v = col[i];
                for k in (i + 1)..n {
                    v -= self.l.get(k, i) * col[k];
                }
                col[i] = v / self.l.get(i, i);
            }
        }
        Ok(x)
    }
}
