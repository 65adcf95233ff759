//! Coding-rate functionals, the rate-reduction objective, and the
//! projection-augmented local loss with analytic feature gradients.
//!
//! The whole-space rate of a feature matrix Z (d x m, unit-norm columns) is
//! `R(Z) = 1/2 logdet(I + α Z Z^T)` with `α = d/(m ε²)`; the class-wise rate
//! weights each class block by its sample share and uses `α_k = d/(m_k ε²)`.
//! Log-determinants go through Cholesky of the smaller Gram side (the two
//! sides agree by Sylvester's determinant identity).

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, DenseMatrix, ProjectionOperator};
use crate::scalar::Scalar;

/// Feature matrix with unit-norm columns (d x m).
#[derive(Debug, Clone)]
pub struct FeatureMatrix<S> {
    matrix: DenseMatrix<S>,
}

impl<S: Scalar> FeatureMatrix<S> {
    /// Validates that every column has unit Euclidean norm.
    pub fn new(matrix: DenseMatrix<S>) -> Result<Self> {
        for j in 0..matrix.cols() {
            let norm = column_norm(&matrix, j);
            if (norm - S::one()).abs() > S::unit_norm_tol() {
                return Err(Error::InvalidMatrix(format!(
                    "column {j} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self { matrix })
    }

    /// Normalizes each column onto the unit sphere. Exactly-zero columns
    /// map to the first coordinate vector so the invariant always holds.
    pub fn from_normalized(matrix: &DenseMatrix<S>) -> Self {
        let mut m = matrix.clone();
        for j in 0..m.cols() {
            let norm = column_norm(&m, j);
            let col = m.col_mut(j);
            if norm > S::zero() {
                let inv = S::one() / norm;
                for x in col.iter_mut() {
                    *x *= inv;
                }
            } else {
                col[0] = S::one();
            }
        }
        Self { matrix: m }
    }

    pub fn matrix(&self) -> &DenseMatrix<S> {
        &self.matrix
    }

    pub fn feature_dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn sample_count(&self) -> usize {
        self.matrix.cols()
    }

    pub fn select_columns(&self, idx: &[usize]) -> Self {
        Self {
            matrix: self.matrix.select_columns(idx),
        }
    }
}

fn column_norm<S: Scalar>(m: &DenseMatrix<S>, j: usize) -> S {
    m.col(j).iter().map(|x| *x * *x).sum::<S>().sqrt()
}

/// Per-class membership of samples: `labels[j]` is the class of column j.
#[derive(Debug, Clone)]
pub struct MembershipPartition {
    labels: Vec<usize>,
    class_count: usize,
    class_indices: Vec<Vec<usize>>,
}

impl MembershipPartition {
    pub fn from_labels(labels: &[usize], class_count: usize) -> Result<Self> {
        let mut class_indices = vec![Vec::new(); class_count];
        for (j, &label) in labels.iter().enumerate() {
            if label >= class_count {
                return Err(Error::InvalidPartition { label, class_count });
            }
            class_indices[label].push(j);
        }
        Ok(Self {
            labels: labels.to_vec(),
            class_count,
            class_indices,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn sample_count(&self) -> usize {
        self.labels.len()
    }

    /// Column indices of class k (tr(Π_k) is their count).
    pub fn class_indices(&self, k: usize) -> &[usize] {
        &self.class_indices[k]
    }

    pub fn class_size(&self, k: usize) -> usize {
        self.class_indices[k].len()
    }
}

/// Distortion parameter ε² and the feature dimension it applies to.
#[derive(Debug, Clone, Copy)]
pub struct RateConfig<S> {
    pub epsilon_sq: S,
    pub feature_dim: usize,
}

impl<S: Scalar> RateConfig<S> {
    pub fn new(epsilon_sq: S, feature_dim: usize) -> Result<Self> {
        if !(epsilon_sq > S::zero()) || !epsilon_sq.is_finite() {
            return Err(Error::ConfigError(format!(
                "epsilon_sq must be positive and finite, got {epsilon_sq}"
            )));
        }
        Ok(Self {
            epsilon_sq,
            feature_dim,
        })
    }

    fn check_dim(&self, z_rows: usize) -> Result<()> {
        if z_rows != self.feature_dim {
            return Err(Error::DimensionMismatch(format!(
                "features of dim {} with rate config dim {}",
                z_rows, self.feature_dim
            )));
        }
        Ok(())
    }
}

/// Decomposed value of the local training loss.
#[derive(Debug, Clone, Copy)]
pub struct LocalLossValue<S> {
    pub rate_expand: S,
    pub rate_compress: S,
    pub projection_penalty: S,
    pub lambda: S,
    pub total: S,
}

/// `1/2 logdet(I + α M M^T)` evaluated on the smaller Gram side.
fn half_logdet_rate<S: Scalar>(m: &DenseMatrix<S>, alpha: S) -> Result<S> {
    let gram = if m.rows() <= m.cols() {
        m.gram()
    } else {
        m.gram_t()
    };
    let n = gram.rows();
    let mut sys = gram.scale(alpha);
    for i in 0..n {
        sys.set(i, i, sys.get(i, i) + S::one());
    }
    let chol = Cholesky::new(&sys)?;
    Ok(chol.log_det() * S::of(0.5))
}

/// Whole-space coding rate on a raw matrix (no unit-norm requirement);
/// used internally and by the verification suites on projected features.
pub fn coding_rate_matrix<S: Scalar>(z: &DenseMatrix<S>, cfg: &RateConfig<S>) -> Result<S> {
    cfg.check_dim(z.rows())?;
    if z.cols() == 0 {
        return Err(Error::InvalidCount("coding rate of zero samples".into()));
    }
    let alpha = alpha_whole(z.cols(), cfg);
    half_logdet_rate(z, alpha)
}

/// Class-conditional coding rate on a raw matrix.
pub fn class_coding_rate_matrix<S: Scalar>(
    z: &DenseMatrix<S>,
    part: &MembershipPartition,
    cfg: &RateConfig<S>,
) -> Result<S> {
    cfg.check_dim(z.rows())?;
    if part.sample_count() != z.cols() {
        return Err(Error::DimensionMismatch(format!(
            "partition over {} samples, features have {}",
            part.sample_count(),
            z.cols()
        )));
    }
    let m = z.cols();
    let mut total = S::zero();
    for k in 0..part.class_count() {
        let mk = part.class_size(k);
        if mk == 0 {
            continue; // empty class contributes exactly zero
        }
        let zk = z.select_columns(part.class_indices(k));
        let alpha_k = alpha_class(mk, cfg);
        let weight = S::from_usize(mk).unwrap() / S::from_usize(m).unwrap();
        total += weight * half_logdet_rate(&zk, alpha_k)?;
    }
    Ok(total)
}

/// Rate-reduction objective on a raw matrix: whole-space minus class-wise.
pub fn mcr2_objective_matrix<S: Scalar>(
    z: &DenseMatrix<S>,
    part: &MembershipPartition,
    cfg: &RateConfig<S>,
) -> Result<S> {
    Ok(coding_rate_matrix(z, cfg)? - class_coding_rate_matrix(z, part, cfg)?)
}

/// Whole-space coding rate `R(Z, ε)` of unit-norm features.
pub fn coding_rate<S: Scalar>(z: &FeatureMatrix<S>, cfg: &RateConfig<S>) -> Result<S> {
    coding_rate_matrix(z.matrix(), cfg)
}

/// Class-conditional coding rate `R^c(Z, ε | Π)`.
pub fn class_coding_rate<S: Scalar>(
    z: &FeatureMatrix<S>,
    part: &MembershipPartition,
    cfg: &RateConfig<S>,
) -> Result<S> {
    class_coding_rate_matrix(z.matrix(), part, cfg)
}

/// Rate reduction `M(Z) = R(Z) - R^c(Z | Π)`.
pub fn mcr2_objective<S: Scalar>(
    z: &FeatureMatrix<S>,
    part: &MembershipPartition,
    cfg: &RateConfig<S>,
) -> Result<S> {
    mcr2_objective_matrix(z.matrix(), part, cfg)
}

/// Σ_k |Z_k - P_k Z_k|_F², one feature block and projector per class.
pub fn projection_penalty<S: Scalar>(
    z_by_class: &[FeatureMatrix<S>],
    projectors: &[ProjectionOperator<S>],
) -> Result<S> {
    if z_by_class.len() != projectors.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature blocks vs {} projectors",
            z_by_class.len(),
            projectors.len()
        )));
    }
    let mut total = S::zero();
    for (zk, pk) in z_by_class.iter().zip(projectors) {
        let resid = pk.residual(zk.matrix())?;
        let norm = resid.frobenius_norm();
        total += norm * norm;
    }
    Ok(total)
}

fn alpha_whole<S: Scalar>(m: usize, cfg: &RateConfig<S>) -> S {
    S::from_usize(cfg.feature_dim).unwrap() / (S::from_usize(m).unwrap() * cfg.epsilon_sq)
}

fn alpha_class<S: Scalar>(mk: usize, cfg: &RateConfig<S>) -> S {
    S::from_usize(cfg.feature_dim).unwrap() / (S::from_usize(mk).unwrap() * cfg.epsilon_sq)
}

fn penalty_pooled<S: Scalar>(
    z: &DenseMatrix<S>,
    part: &MembershipPartition,
    projectors: &[ProjectionOperator<S>],
) -> Result<S> {
    let mut total = S::zero();
    for k in 0..part.class_count() {
        if part.class_size(k) == 0 {
            continue;
        }
        let zk = z.select_columns(part.class_indices(k));
        let resid = projectors[k].residual(&zk)?;
        let norm = resid.frobenius_norm();
        total += norm * norm;
    }
    Ok(total)
}

/// Local loss `R^c - R + λ Σ_k |Z_k - P_k Z_k|_F²` with its parts.
pub fn local_loss<S: Scalar>(
    z: &FeatureMatrix<S>,
    part: &MembershipPartition,
    projectors: &[ProjectionOperator<S>],
    lambda: S,
    cfg: &RateConfig<S>,
) -> Result<LocalLossValue<S>> {
    if projectors.len() != part.class_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} projectors for {} classes",
            projectors.len(),
            part.class_count()
        )));
    }
    let rate_expand = coding_rate(z, cfg)?;
    let rate_compress = class_coding_rate(z, part, cfg)?;
    let projection_penalty = penalty_pooled(z.matrix(), part, projectors)?;
    Ok(LocalLossValue {
        rate_expand,
        rate_compress,
        projection_penalty,
        lambda,
        total: rate_compress - rate_expand + lambda * projection_penalty,
    })
}

/// Solves `(I + α M M^T)^{-1} M` through whichever Gram side is smaller,
/// using `(I + α M M^T)^{-1} M = M (I + α M^T M)^{-1}`.
fn resolvent_apply<S: Scalar>(m: &DenseMatrix<S>, alpha: S) -> Result<DenseMatrix<S>> {
    if m.rows() <= m.cols() {
        let mut sys = m.gram().scale(alpha);
        for i in 0..sys.rows() {
            sys.set(i, i, sys.get(i, i) + S::one());
        }
        Cholesky::new(&sys)?.solve(m)
    } else {
        let mut sys = m.gram_t().scale(alpha);
        for i in 0..sys.rows() {
            sys.set(i, i, sys.get(i, i) + S::one());
        }
        let x = Cholesky::new(&sys)?.solve(&m.transpose())?;
        Ok(x.transpose())
    }
}

/// Analytic gradient of the local loss with respect to the features.
///
/// Per column block: `∇R = α (I + α Z Z^T)^{-1} Z`, the class-k compress
/// term contributes `α (I + α_k Z_k Z_k^T)^{-1} Z_k` on its own columns,
/// and the penalty adds `2λ (I - P_k) Z_k`. The total is
/// `∇(R^c) - ∇R + ∇penalty`.
pub fn local_loss_gradient<S: Scalar>(
    z: &FeatureMatrix<S>,
    part: &MembershipPartition,
    projectors: &[ProjectionOperator<S>],
    lambda: S,
    cfg: &RateConfig<S>,
) -> Result<DenseMatrix<S>> {
    cfg.check_dim(z.feature_dim())?;
    if part.sample_count() != z.sample_count() {
        return Err(Error::DimensionMismatch(
            "partition/sample count mismatch".into(),
        ));
    }
    if projectors.len() != part.class_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} projectors for {} classes",
            projectors.len(),
            part.class_count()
        )));
    }
    let zm = z.matrix();
    let m = zm.cols();
    let alpha = alpha_whole(m, cfg);

    // -∇R
    let expand = resolvent_apply(zm, alpha)?;
    let mut grad = expand.scale(-alpha);

    for k in 0..part.class_count() {
        let idx = part.class_indices(k);
        if idx.is_empty() {
            continue;
        }
        let zk = zm.select_columns(idx);
        let alpha_k = alpha_class(idx.len(), cfg);
        // (tr Π_k / m) α_k reduces to the whole-space α.
        let compress = resolvent_apply(&zk, alpha_k)?.scale(alpha);
        let mut block = compress;
        if lambda > S::zero() {
            let resid = projectors[k].residual(&zk)?;
            block = block.add_scaled(&resid, S::of(2.0) * lambda)?;
        }
        let merged = grad.select_columns(idx).add_scaled(&block, S::one())?;
        grad.set_columns(idx, &merged);
    }
    if !grad.is_finite() {
        return Err(Error::NumericalFailure(
            "non-finite loss gradient".into(),
        ));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize) -> RateConfig<f64> {
        RateConfig::new(0.5, d).unwrap()
    }

    #[test]
    fn zero_features_have_zero_rate() {
        let z = DenseMatrix::<f64>::zeros(3, 5);
        let r = coding_rate_matrix(&z, &cfg(3)).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn identity_two_features_rate_is_log3() {
        // d=2, m=2, ε²=0.5 → α=2; eigenvalues of I+αZZ^T are (3,3),
        // so R = 1/2·2·log 3 = log 3.
        let z = FeatureMatrix::new(DenseMatrix::identity(2)).unwrap();
        let r = coding_rate(&z, &cfg(2)).unwrap();
        assert!((r - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_class_rate_equals_whole_rate() {
        let z = FeatureMatrix::new(DenseMatrix::identity(4)).unwrap();
        let part = MembershipPartition::from_labels(&[0, 0, 0, 0], 1).unwrap();
        let r = coding_rate(&z, &cfg(4)).unwrap();
        let rc = class_coding_rate(&z, &part, &cfg(4)).unwrap();
        assert!((r - rc).abs() < 1e-12);
        assert!(mcr2_objective(&z, &part, &cfg(4)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn empty_class_contributes_nothing() {
        let z = FeatureMatrix::new(DenseMatrix::identity(4)).unwrap();
        let one = MembershipPartition::from_labels(&[0, 0, 0, 0], 1).unwrap();
        let two = MembershipPartition::from_labels(&[0, 0, 0, 0], 2).unwrap();
        let a = class_coding_rate(&z, &one, &cfg(4)).unwrap();
        let b = class_coding_rate(&z, &two, &cfg(4)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_rejected() {
        assert!(matches!(
            MembershipPartition::from_labels(&[0, 2], 2),
            Err(Error::InvalidPartition { label: 2, .. })
        ));
    }

    #[test]
    fn penalty_cases() {
        // Columns inside the projector range → 0.
        let u = crate::linalg::OrthonormalBasis::new(
            DenseMatrix::new(2, 1, vec![1.0, 0.0]).unwrap(),
        )
        .unwrap();
        let p = crate::linalg::projector_from_basis(&u);
        let inside = FeatureMatrix::new(DenseMatrix::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap())
            .unwrap();
        assert!(projection_penalty(&[inside.clone()], &[p.clone()]).unwrap() < 1e-15);

        // e1 column against a projector onto e2 → 1.
        let u2 = crate::linalg::OrthonormalBasis::new(
            DenseMatrix::new(2, 1, vec![0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let p2 = crate::linalg::projector_from_basis(&u2);
        let e1 =
            FeatureMatrix::new(DenseMatrix::new(2, 1, vec![1.0f64, 0.0]).unwrap()).unwrap();
        assert!((projection_penalty(&[e1], &[p2]).unwrap() - 1.0).abs() < 1e-12);

        // Rank-zero projectors: the penalty is the total feature energy,
        // which is the sample count for unit-norm columns.
        let z1 = FeatureMatrix::new(DenseMatrix::<f64>::identity(3)).unwrap();
        let z2 = FeatureMatrix::new(
            DenseMatrix::new(3, 2, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(),
        )
        .unwrap();
        let zeros = vec![ProjectionOperator::zero(3), ProjectionOperator::zero(3)];
        let penalty = projection_penalty(&[z1, z2], &zeros).unwrap();
        assert!((penalty - 5.0).abs() < 1e-12);
    }

    #[test]
    fn loss_reassembles_from_parts() {
        let z = FeatureMatrix::new(DenseMatrix::identity(4)).unwrap();
        let part = MembershipPartition::from_labels(&[0, 0, 1, 1], 2).unwrap();
        let projectors = vec![
            ProjectionOperator::identity(4),
            ProjectionOperator::identity(4),
        ];
        let v = local_loss(&z, &part, &projectors, 3.0, &cfg(4)).unwrap();
        assert_eq!(v.projection_penalty, 0.0);
        let expect = v.rate_compress - v.rate_expand + v.lambda * v.projection_penalty;
        assert!((v.total - expect).abs() < 1e-12);
    }
}
