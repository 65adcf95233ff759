//! Thin SVD via one-sided Jacobi rotations.
//!
//! Chosen over bidiagonalization for its simplicity, high relative accuracy
//! and straightforward determinism: the sweep order is fixed, there are no
//! threaded reductions, and identical input bits give identical output bits.

use super::basis::{sign_canonicalize, OrthonormalBasis};
use super::{dot, DenseMatrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 64;

/// Thin singular value decomposition `A = U Σ V^T`.
///
/// `U` is rows x k and `V` is cols x k with `k = min(rows, cols)`;
/// singular values are sorted non-increasing and singular vectors are
/// sign-canonical (largest-magnitude entry of each `U` column positive).
#[derive(Debug, Clone)]
pub struct SingularTriple<S> {
    pub u_basis: OrthonormalBasis<S>,
    pub singular_values: Vec<S>,
    pub v_basis: OrthonormalBasis<S>,
}

impl<S: Scalar> SingularTriple<S> {
    /// Reconstructs `U Σ V^T`.
    pub fn reconstruct(&self) -> DenseMatrix<S> {
        let u = self.u_basis.matrix();
        let v = self.v_basis.matrix();
        let k = self.singular_values.len();
        let mut scaled = u.clone();
        for j in 0..k {
            let s = self.singular_values[j];
            for x in scaled.col_mut(j) {
                *x *= s;
            }
        }
        scaled.matmul(&v.transpose()).expect("shapes agree")
    }
}

/// Thin SVD of an arbitrary matrix with at least one row and column.
pub fn thin_svd<S: Scalar>(a: &DenseMatrix<S>) -> Result<SingularTriple<S>> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::InvalidMatrix("empty matrix".into()));
    }
    if !a.is_finite() {
        return Err(Error::InvalidMatrix("non-finite entry".into()));
    }
    if a.rows() >= a.cols() {
        let (u, s, v) = jacobi_tall(a)?;
        finish(u, s, v)
    } else {
        let (u, s, v) = jacobi_tall(&a.transpose())?;
        finish(v, s, u)
    }
}

fn finish<S: Scalar>(
    mut u: DenseMatrix<S>,
    s: Vec<S>,
    mut v: DenseMatrix<S>,
) -> Result<SingularTriple<S>> {
    // One sign convention for U, mirrored on V so the product is unchanged.
    let flips = sign_canonicalize(&mut u);
    for (j, flip) in flips.iter().enumerate() {
        if *flip {
            for x in v.col_mut(j) {
                *x = -*x;
            }
        }
    }
    let u_basis = OrthonormalBasis::new(u).map_err(into_numerical)?;
    let v_basis = OrthonormalBasis::new_validated(v).map_err(into_numerical)?;
    Ok(SingularTriple {
        u_basis,
        singular_values: s,
        v_basis,
    })
}

fn into_numerical(e: Error) -> Error {
    match e {
        Error::NotOrthonormal { max_dev } => Error::NumericalFailure(format!(
            "rotation sweeps left non-orthonormal factors (max deviation {max_dev:e})"
        )),
        other => other,
    }
}

/// One-sided Jacobi on a matrix with rows >= cols. Returns (U, σ, V) with
/// U rows x cols, V cols x cols.
fn jacobi_tall<S: Scalar>(a: &DenseMatrix<S>) -> Result<(DenseMatrix<S>, Vec<S>, DenseMatrix<S>)> {
    let n = a.cols();
    let mut w = a.clone();
    let mut v = DenseMatrix::identity(n);
    let eps = S::epsilon();

    // Columns that collapse below this (relative to the largest input
    // column) are numerically zero; rotating them further only churns
    // denormals, so they are flushed to exact zero instead.
    let scale_sq = (0..n)
        .map(|j| dot(w.col(j), w.col(j)))
        .fold(S::zero(), |a, b| a.max(b));
    let floor = scale_sq * eps * eps;

    let mut sweeps = 0;
    loop {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let app = dot(w.col(p), w.col(p));
                let aqq = dot(w.col(q), w.col(q));
                if app <= floor {
                    flush_column(&mut w, p);
                    continue;
                }
                if aqq <= floor {
                    flush_column(&mut w, q);
                    continue;
                }
                let apq = dot(w.col(p), w.col(q));
                if apq.abs() <= eps * app.sqrt() * aqq.sqrt() {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (S::of(2.0) * apq);
                let t = if tau >= S::zero() {
                    S::one() / (tau + (S::one() + tau * tau).sqrt())
                } else {
                    -S::one() / (-tau + (S::one() + tau * tau).sqrt())
                };
                let c = S::one() / (S::one() + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut w, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
        sweeps += 1;
        if sweeps > MAX_SWEEPS {
            let norms: Vec<f64> = (0..n)
                .map(|j| dot(w.col(j), w.col(j)).sqrt().to_f64_lossy())
                .collect();
            let max = norms.iter().cloned().fold(0.0, f64::max);
            let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
            return Err(Error::NumericalFailure(format!(
                "jacobi sweeps exceeded {MAX_SWEEPS}; column norm range [{min:e}, {max:e}], \
                 condition estimate {:e}",
                if min > 0.0 { max / min } else { f64::INFINITY }
            )));
        }
    }

    // Column norms are the singular values. Sort descending; ties keep the
    // original column order so truncation is reproducible.
    let mut sigma: Vec<S> = (0..n).map(|j| dot(w.col(j), w.col(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        sigma[j]
            .partial_cmp(&sigma[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let w_sorted = w.select_columns(&order);
    let v_sorted = v.select_columns(&order);
    sigma = order.iter().map(|&i| sigma[i]).collect();

    // Normalize columns; replace numerically-zero ones with a deterministic
    // orthonormal completion so U is always a full orthonormal frame.
    let cutoff = sigma[0] * S::rank_cutoff();
    let mut u = DenseMatrix::zeros(a.rows(), n);
    let mut filled = 0;
    for j in 0..n {
        if sigma[j] > cutoff && sigma[j] > S::zero() {
            let inv = S::one() / sigma[j];
            let src = w_sorted.col(j);
            let dst = u.col_mut(j);
            for i in 0..src.len() {
                dst[i] = src[i] * inv;
            }
            filled = j + 1;
        }
    }
    if filled < n {
        complete_frame(&mut u, filled)?;
    }
    Ok((u, sigma, v_sorted))
}

fn flush_column<S: Scalar>(m: &mut DenseMatrix<S>, j: usize) {
    for x in m.col_mut(j) {
        *x = S::zero();
    }
}

#[inline]
fn rotate_pair<S: Scalar>(m: &mut DenseMatrix<S>, p: usize, q: usize, c: S, s: S) {
    let rows = m.rows();
    for i in 0..rows {
        let xp = m.get(i, p);
        let xq = m.get(i, q);
        m.set(i, p, c * xp - s * xq);
        m.set(i, q, s * xp + c * xq);
    }
}

/// Fills columns `from..` of `u` with unit vectors orthogonal to the ones
/// already present. Each slot takes the coordinate direction with the
/// largest residual against the accepted columns (lowest index on ties),
/// which is deterministic and always bounded away from zero while fewer
/// than `rows` columns are placed.
fn complete_frame<S: Scalar>(u: &mut DenseMatrix<S>, from: usize) -> Result<()> {
    let rows = u.rows();
    let n = u.cols();
    for next in from..n {
        let mut best: Option<(S, Vec<S>)> = None;
        for e in 0..rows {
            let mut cand = vec![S::zero(); rows];
            cand[e] = S::one();
            for _ in 0..2 {
                for j in 0..next {
                    let proj = dot(&cand, u.col(j));
                    let col = u.col(j);
                    for i in 0..rows {
                        cand[i] -= proj * col[i];
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if best.as_ref().is_none_or(|(b, _)| norm > *b) {
                best = Some((norm, cand));
            }
        }
        match best {
            Some((norm, cand)) if norm > S::of(1e-6) => {
                let inv = S::one() / norm;
                let dst = u.col_mut(next);
                for i in 0..rows {
                    dst[i] = cand[i] * inv;
                }
            }
            _ => {
                return Err(Error::NumericalFailure(
                    "could not complete orthonormal frame".into(),
                ));
            }
        }
    }
    Ok(())
}
