//! Orthonormal bases, projectors, and subspace geometry.

use super::svd::{thin_svd, SingularTriple};
use super::{dot, DenseMatrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Column-orthonormal matrix spanning a subspace.
///
/// Construction validates orthonormality and then canonicalizes column
/// signs: the entry of largest magnitude in each column is made positive,
/// ties broken by lowest row index. Sign flips do not change the subspace,
/// and the convention makes independently computed bases comparable
/// bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalBasis<S> {
    matrix: DenseMatrix<S>,
}

impl<S: Scalar> OrthonormalBasis<S> {
    pub fn new(mut matrix: DenseMatrix<S>) -> Result<Self> {
        Self::check_orthonormal(&matrix)?;
        sign_canonicalize(&mut matrix);
        Ok(Self { matrix })
    }

    /// Validates orthonormality but keeps the given column signs. Used for
    /// the right singular factor, whose signs must compensate the left
    /// factor's canonicalization so the product is preserved.
    pub(crate) fn new_validated(matrix: DenseMatrix<S>) -> Result<Self> {
        Self::check_orthonormal(&matrix)?;
        Ok(Self { matrix })
    }

    fn check_orthonormal(matrix: &DenseMatrix<S>) -> Result<()> {
        if matrix.cols() > matrix.rows() {
            return Err(Error::DimensionMismatch(format!(
                "basis with {} columns in ambient dimension {}",
                matrix.cols(),
                matrix.rows()
            )));
        }
        let gram = matrix.gram_t();
        let mut max_dev = S::zero();
        for i in 0..gram.rows() {
            for j in 0..gram.cols() {
                let target = if i == j { S::one() } else { S::zero() };
                let dev = (gram.get(i, j) - target).abs();
                if dev > max_dev {
                    max_dev = dev;
                }
            }
        }
        if max_dev > S::orthonormal_tol() {
            return Err(Error::NotOrthonormal {
                max_dev: max_dev.to_f64_lossy(),
            });
        }
        Ok(())
    }

    pub fn matrix(&self) -> &DenseMatrix<S> {
        &self.matrix
    }

    /// Ambient dimension d.
    pub fn dim_ambient(&self) -> usize {
        self.matrix.rows()
    }

    /// Subspace dimension r.
    pub fn dim_subspace(&self) -> usize {
        self.matrix.cols()
    }

    /// `U U^T z` for a batch of columns: projection onto the subspace
    /// without forming the d x d operator.
    pub fn project(&self, z: &DenseMatrix<S>) -> Result<DenseMatrix<S>> {
        let coeff = self.matrix.transpose_matmul(z)?;
        self.matrix.matmul(&coeff)
    }
}

/// Flips column signs so each column's largest-magnitude entry (lowest row
/// index among exact ties) is positive. Returns which columns were flipped.
pub(crate) fn sign_canonicalize<S: Scalar>(m: &mut DenseMatrix<S>) -> Vec<bool> {
    let mut flips = vec![false; m.cols()];
    for j in 0..m.cols() {
        let col = m.col(j);
        let mut best = 0usize;
        let mut best_abs = col[0].abs();
        for (i, x) in col.iter().enumerate().skip(1) {
            if x.abs() > best_abs {
                best_abs = x.abs();
                best = i;
            }
        }
        if col[best] < S::zero() {
            flips[j] = true;
            for x in m.col_mut(j) {
                *x = -*x;
            }
        }
    }
    flips
}

/// Symmetric idempotent projector `P = U U^T` onto a subspace.
#[derive(Debug, Clone)]
pub struct ProjectionOperator<S> {
    matrix: DenseMatrix<S>,
    rank: usize,
}

impl<S: Scalar> ProjectionOperator<S> {
    /// Identity operator; projecting with it leaves features unchanged.
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: DenseMatrix::identity(dim),
            rank: dim,
        }
    }

    /// Rank-zero operator projecting everything to the origin.
    pub fn zero(dim: usize) -> Self {
        Self {
            matrix: DenseMatrix::zeros(dim, dim),
            rank: 0,
        }
    }

    pub fn matrix(&self) -> &DenseMatrix<S> {
        &self.matrix
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_identity(&self) -> bool {
        self.rank == self.matrix.rows()
    }

    /// `P z`.
    pub fn apply(&self, z: &DenseMatrix<S>) -> Result<DenseMatrix<S>> {
        if z.rows() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "projector dim {} applied to features of dim {}",
                self.dim(),
                z.rows()
            )));
        }
        if self.is_identity() {
            return Ok(z.clone());
        }
        self.matrix.matmul(z)
    }

    /// `(I - P) z`, the residual off the subspace.
    pub fn residual(&self, z: &DenseMatrix<S>) -> Result<DenseMatrix<S>> {
        if self.is_identity() {
            return Ok(DenseMatrix::zeros(z.rows(), z.cols()));
        }
        let proj = self.apply(z)?;
        z.add_scaled(&proj, -S::one())
    }
}

/// `P = U U^T` from an orthonormal basis.
pub fn projector_from_basis<S: Scalar>(u: &OrthonormalBasis<S>) -> ProjectionOperator<S> {
    ProjectionOperator {
        matrix: u.matrix().gram(),
        rank: u.dim_subspace(),
    }
}

/// Keeps the leading `p` columns of the left singular basis.
///
/// Singular values are already sorted non-increasing with ties in original
/// column order, so the choice is deterministic.
pub fn truncate_basis<S: Scalar>(svd: &SingularTriple<S>, p: usize) -> Result<OrthonormalBasis<S>> {
    let available = svd.u_basis.dim_subspace();
    if p == 0 || p > available {
        return Err(Error::InvalidTruncation {
            requested: p,
            available,
        });
    }
    let idx: Vec<usize> = (0..p).collect();
    OrthonormalBasis::new(svd.u_basis.matrix().select_columns(&idx))
}

/// Principal angles between two subspaces of the same ambient space,
/// ascending, `min(r1, r2)` of them. Computed as arccos of the singular
/// values of `U1^T U2`, with cosines clamped into [0, 1] to absorb
/// floating-point overshoot.
pub fn principal_angles<S: Scalar>(
    u1: &OrthonormalBasis<S>,
    u2: &OrthonormalBasis<S>,
) -> Result<Vec<S>> {
    if u1.dim_ambient() != u2.dim_ambient() {
        return Err(Error::DimensionMismatch(format!(
            "ambient dims {} vs {}",
            u1.dim_ambient(),
            u2.dim_ambient()
        )));
    }
    let c = u1.matrix().transpose_matmul(u2.matrix())?;
    let svd = thin_svd(&c)?;
    Ok(svd
        .singular_values
        .iter()
        .map(|&s| {
            let clamped = s.min(S::one()).max(S::zero());
            clamped.acos()
        })
        .collect())
}

/// Grassmann distance between equal-dimension subspaces: the spectral norm
/// of the projector difference, equal to the sine of the largest principal
/// angle.
///
/// Evaluated as the largest singular value of `(I - U1 U1^T) U2`, which is
/// accurate for small angles where the arccos route loses precision.
pub fn grassmann_distance<S: Scalar>(
    u1: &OrthonormalBasis<S>,
    u2: &OrthonormalBasis<S>,
) -> Result<S> {
    if u1.dim_ambient() != u2.dim_ambient() {
        return Err(Error::DimensionMismatch(format!(
            "ambient dims {} vs {}",
            u1.dim_ambient(),
            u2.dim_ambient()
        )));
    }
    if u1.dim_subspace() != u2.dim_subspace() {
        return Err(Error::DimensionMismatch(format!(
            "subspace dims {} vs {}",
            u1.dim_subspace(),
            u2.dim_subspace()
        )));
    }
    largest_residual_sine(u1, u2.matrix())
}

/// How far `target`'s column space sticks out of `hull`: the sine of the
/// largest principal angle between `target` and its best approximation
/// inside `hull`. Zero iff `range(target) ⊆ range(hull)`. Dimensions may
/// differ; for equal dimensions this is the Grassmann distance.
pub fn subspace_containment<S: Scalar>(
    hull: &OrthonormalBasis<S>,
    target: &OrthonormalBasis<S>,
) -> Result<S> {
    if hull.dim_ambient() != target.dim_ambient() {
        return Err(Error::DimensionMismatch(format!(
            "ambient dims {} vs {}",
            hull.dim_ambient(),
            target.dim_ambient()
        )));
    }
    largest_residual_sine(hull, target.matrix())
}

fn largest_residual_sine<S: Scalar>(u1: &OrthonormalBasis<S>, m2: &DenseMatrix<S>) -> Result<S> {
    let proj = u1.project(m2)?;
    let resid = m2.add_scaled(&proj, -S::one())?;
    let svd = thin_svd(&resid)?;
    Ok(svd.singular_values[0].min(S::one()))
}

/// Orthonormalizes the columns of `m` in place-order via twice-iterated
/// Gram-Schmidt. Errors if the columns are numerically rank deficient.
pub fn orthonormalize_columns<S: Scalar>(m: &DenseMatrix<S>) -> Result<OrthonormalBasis<S>> {
    let rows = m.rows();
    let cols = m.cols();
    if cols > rows {
        return Err(Error::DimensionMismatch(
            "more columns than ambient dimension".into(),
        ));
    }
    let mut q = DenseMatrix::zeros(rows, cols);
    for j in 0..cols {
        let mut v: Vec<S> = m.col(j).to_vec();
        for _ in 0..2 {
            for i in 0..j {
                let proj = dot(&v, q.col(i));
                let qi = q.col(i);
                for r in 0..rows {
                    v[r] -= proj * qi[r];
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < S::of(1e-8) * m.col(j).iter().map(|x| *x * *x).sum::<S>().sqrt().max(S::one()) {
            return Err(Error::NumericalFailure(format!(
                "rank-deficient columns at index {j}"
            )));
        }
        let inv = S::one() / norm;
        let dst = q.col_mut(j);
        for r in 0..rows {
            dst[r] = v[r] * inv;
        }
    }
    OrthonormalBasis::new(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis_cols(rows: usize, cols: &[&[f64]]) -> OrthonormalBasis<f64> {
        let m = DenseMatrix::from_fn(rows, cols.len(), |r, c| cols[c][r]);
        OrthonormalBasis::new(m).unwrap()
    }

    #[test]
    fn rejects_non_orthonormal() {
        let m = DenseMatrix::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(matches!(
            OrthonormalBasis::new(m),
            Err(Error::NotOrthonormal { .. })
        ));
    }

    #[test]
    fn canonicalizes_signs() {
        let m = DenseMatrix::new(2, 1, vec![0.0, -1.0]).unwrap();
        let b = OrthonormalBasis::new(m).unwrap();
        assert_eq!(b.matrix().get(1, 0), 1.0);
    }

    #[test]
    fn projector_onto_leading_coordinates() {
        let u = basis_cols(4, &[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]]);
        let p = projector_from_basis(&u);
        for i in 0..4 {
            for j in 0..4 {
                let e = if i == j && i < 2 { 1.0 } else { 0.0 };
                assert!((p.matrix().get(i, j) - e).abs() < 1e-15);
            }
        }
        assert_eq!(p.rank(), 2);
    }

    #[test]
    fn projector_onto_diagonal_plane() {
        // span{(1,1)/sqrt(2)} in R^2: P = [[.5,.5],[.5,.5]]
        let s = 1.0 / 2.0f64.sqrt();
        let u = basis_cols(2, &[&[s, s]]);
        let p = projector_from_basis(&u);
        for i in 0..2 {
            for j in 0..2 {
                assert!((p.matrix().get(i, j) - 0.5).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn identity_projector_has_zero_residual()
    {
        let p = ProjectionOperator::<f64>::identity(3);
        let z = DenseMatrix::from_fn(3, 2, |r, c| (r + c) as f64);
        let r = p.residual(&z).unwrap();
        assert_eq!(r.frobenius_norm(), 0.0);
    }

    #[test]
    fn angles_match_planar_rotation() {
        let theta: f64 = 0.3;
        let u1 = basis_cols(2, &[&[1.0, 0.0]]);
        let u2 = basis_cols(2, &[&[theta.cos(), theta.sin()]]);
        let angles = principal_angles(&u1, &u2).unwrap();
        assert_eq!(angles.len(), 1);
        assert!((angles[0] - 0.3).abs() < 1e-12);
        let d = grassmann_distance(&u1, &u2).unwrap();
        assert!((d - theta.sin()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_lines_are_distance_one() {
        let u1 = basis_cols(2, &[&[1.0, 0.0]]);
        let u2 = basis_cols(2, &[&[0.0, 1.0]]);
        assert!((grassmann_distance(&u1, &u2).unwrap() - 1.0).abs() < 1e-12);
        let angles = principal_angles(&u1, &u2).unwrap();
        assert!((angles[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn identical_subspaces_are_distance_zero() {
        let s = 1.0 / 2.0f64.sqrt();
        let u = basis_cols(2, &[&[s, s]]);
        assert!(grassmann_distance(&u, &u).unwrap() < 1e-14);
        assert!(principal_angles(&u, &u).unwrap()[0] < 1e-7);
    }

    #[test]
    fn unequal_dims_rejected_for_distance_but_not_angles() {
        let u1 = basis_cols(3, &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let u2 = basis_cols(3, &[&[0.0, 0.0, 1.0]]);
        assert!(matches!(
            grassmann_distance(&u1, &u2),
            Err(Error::DimensionMismatch(_))
        ));
        let angles = principal_angles(&u1, &u2).unwrap();
        assert_eq!(angles.len(), 1);
        assert!(subspace_containment(&u1, &u2).unwrap() > 0.999);
    }
}
