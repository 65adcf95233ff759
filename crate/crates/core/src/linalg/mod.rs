//! Deterministic dense linear algebra: matrices, thin SVD, orthonormal
//! bases, projectors, principal angles, Grassmann distance.
//!
//! Storage is column-major throughout the crate; every routine is a pure
//! function of its input bits, with no threaded reductions, so results are
//! reproducible across runs and thread counts.

mod basis;
mod chol;
mod svd;

pub use basis::{
    grassmann_distance, orthonormalize_columns, principal_angles, projector_from_basis,
    subspace_containment, truncate_basis, OrthonormalBasis, ProjectionOperator,
};
pub use chol::Cholesky;
pub use svd::{thin_svd, SingularTriple};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense matrix with column-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> DenseMatrix<S> {
    /// Builds a matrix from column-major data, rejecting non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidMatrix(format!(
                "expected {}x{}={} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidMatrix("non-finite entry".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, S::one());
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for c in 0..cols {
            for r in 0..rows {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[c * self.rows + r]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[c * self.rows + r] = v;
    }

    /// Column `c` as a contiguous slice.
    #[inline]
    pub fn col(&self, c: usize) -> &[S] {
        &self.data[c * self.rows..(c + 1) * self.rows]
    }

    #[inline]
    pub fn col_mut(&mut self, c: usize) -> &mut [S] {
        &mut self.data[c * self.rows..(c + 1) * self.rows]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for j in 0..other.cols {
            let bcol = other.col(j);
            let ocol = out.col_mut(j);
            for (k, &bkj) in bcol.iter().enumerate() {
                if bkj == S::zero() {
                    continue;
                }
                let acol = &self.data[k * self.rows..(k + 1) * self.rows];
                for (i, &aik) in acol.iter().enumerate() {
                    ocol[i] += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * other` without materializing the transpose.
    pub fn transpose_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "transpose_matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for j in 0..other.cols {
            let bcol = other.col(j);
            let ocol = out.col_mut(j);
            for i in 0..self.cols {
                ocol[i] = dot(self.col(i), bcol);
            }
        }
        Ok(out)
    }

    /// Gram matrix `self * self^T` (rows x rows).
    pub fn gram(&self) -> Self {
        let mut g = Self::zeros(self.rows, self.rows);
        for c in 0..self.cols {
            let col = self.col(c);
            for j in 0..self.rows {
                let vj = col[j];
                if vj == S::zero() {
                    continue;
                }
                let gcol = g.col_mut(j);
                for i in 0..self.rows {
                    gcol[i] += col[i] * vj;
                }
            }
        }
        g
    }

    /// Gram matrix `self^T * self` (cols x cols).
    pub fn gram_t(&self) -> Self {
        let mut g = Self::zeros(self.cols, self.cols);
        for j in 0..self.cols {
            for i in 0..=j {
                let v = dot(self.col(i), self.col(j));
                g.set(i, j, v);
                g.set(j, i, v);
            }
        }
        g
    }

    pub fn scale(&self, s: S) -> Self {
        let mut out = self.clone();
        for x in &mut out.data {
            *x *= s;
        }
        out
    }

    /// `self + other * s`.
    pub fn add_scaled(&self, other: &Self, s: S) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch("add_scaled shape".into()));
        }
        let mut out = self.clone();
        for (x, y) in out.data.iter_mut().zip(&other.data) {
            *x += *y * s;
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> S {
        self.data
            .iter()
            .map(|x| *x * *x)
            .fold(S::zero(), |a, b| a + b)
            .sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |a, x| if x.abs() > a { x.abs() } else { a })
    }

    /// Copies the listed columns, in order, into a new matrix.
    pub fn select_columns(&self, idx: &[usize]) -> Self {
        let mut out = Self::zeros(self.rows, idx.len());
        for (j, &c) in idx.iter().enumerate() {
            out.col_mut(j).copy_from_slice(self.col(c));
        }
        out
    }

    /// Writes `block` into the listed columns.
    pub fn set_columns(&mut self, idx: &[usize], block: &Self) {
        assert_eq!(idx.len(), block.cols);
        assert_eq!(self.rows, block.rows);
        for (j, &c) in idx.iter().enumerate() {
            self.col_mut(c).copy_from_slice(block.col(j));
        }
    }

    /// Horizontal concatenation of column blocks.
    pub fn hstack(blocks: &[&Self]) -> Result<Self> {
        let rows = blocks
            .first()
            .ok_or_else(|| Error::InvalidMatrix("hstack of nothing".into()))?
            .rows;
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(Error::DimensionMismatch("hstack row counts".into()));
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut out = Self::zeros(rows, cols);
        let mut at = 0;
        for b in blocks {
            for c in 0..b.cols {
                out.col_mut(at).copy_from_slice(b.col(c));
                at += 1;
            }
        }
        Ok(out)
    }
}

/// Dot product of two equal-length slices.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}
