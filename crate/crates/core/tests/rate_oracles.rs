//! Coding-rate values checked against an independent eigenvalue oracle,
//! the two Gram-side formulations checked against each other, and the
//! analytic gradients checked against central finite differences.

mod common;

use cdl_mvp::linalg::{projector_from_basis, thin_svd, truncate_basis, ProjectionOperator};
use cdl_mvp::rate::{
    class_coding_rate, coding_rate, coding_rate_matrix, local_loss, local_loss_gradient,
    mcr2_objective, projection_penalty, FeatureMatrix, MembershipPartition, RateConfig,
};
use cdl_mvp::theory::residual_energy_per_class;
use common::{
    class_rate_by_eigenvalues, finite_difference_gradient, gaussian_matrix, random_features,
    random_labels, rate_by_eigenvalues, relative_max_error, rng, Mat,
};
use proptest::prelude::*;

fn cfg(d: usize) -> RateConfig<f64> {
    RateConfig::new(0.5, d).unwrap()
}

fn random_projectors(
    r: &mut rand_chacha::ChaCha8Rng,
    d: usize,
    k: usize,
) -> Vec<ProjectionOperator<f64>> {
    use rand::Rng;
    (0..k)
        .map(|_| {
            let rank = r.random_range(1..d.max(2));
            let g = gaussian_matrix(r, d, rank);
            let svd = thin_svd(&g).unwrap();
            projector_from_basis(&truncate_basis(&svd, rank).unwrap())
        })
        .collect()
}

#[test]
fn whole_rate_matches_eigenvalue_oracle_on_seeded_instance() {
    let mut r = rng(3);
    let z = random_features(&mut r, 8, 16);
    let got = coding_rate(&z, &cfg(8)).unwrap();
    let want = rate_by_eigenvalues(z.matrix(), 0.5);
    assert!(
        (got - want).abs() <= 1e-9,
        "cholesky {got} vs eigenvalues {want}"
    );
}

#[test]
fn class_rate_matches_eigenvalue_oracle_balanced_two_classes() {
    let mut r = rng(5);
    let z = random_features(&mut r, 4, 8);
    let labels = vec![0, 1, 0, 1, 0, 1, 0, 1];
    let part = MembershipPartition::from_labels(&labels, 2).unwrap();
    let got = class_coding_rate(&z, &part, &cfg(4)).unwrap();
    let want = class_rate_by_eigenvalues(z.matrix(), &labels, 2, 0.5);
    assert!((got - want).abs() <= 1e-9);
}

#[test]
fn discriminative_configuration_has_positive_objective() {
    // Two classes in orthogonal coordinate planes of R^4.
    let mut r = rng(9);
    let mut cols = Vec::new();
    let mut labels = Vec::new();
    for j in 0..8 {
        use rand::Rng;
        let mut v = [0.0; 4];
        if j % 2 == 0 {
            v[0] = r.random::<f64>() - 0.5;
            v[1] = r.random::<f64>() - 0.5;
            labels.push(0);
        } else {
            v[2] = r.random::<f64>() - 0.5;
            v[3] = r.random::<f64>() - 0.5;
            labels.push(1);
        }
        cols.push(v);
    }
    let z = FeatureMatrix::from_normalized(&Mat::from_fn(4, 8, |i, j| cols[j][i]));
    let part = MembershipPartition::from_labels(&labels, 2).unwrap();
    let m = mcr2_objective(&z, &part, &cfg(4)).unwrap();
    assert!(m > 0.1, "objective {m}");
}

#[test]
fn collapsed_features_have_objective_near_zero() {
    // Every sample is the same unit vector: whole-space and class terms
    // coincide regardless of the partition.
    let z = FeatureMatrix::from_normalized(&Mat::from_fn(4, 10, |r0, _| {
        if r0 == 0 {
            1.0
        } else {
            0.0
        }
    }));
    let labels = vec![0, 1, 0, 1, 1, 0, 1, 0, 0, 1];
    let part = MembershipPartition::from_labels(&labels, 2).unwrap();
    let m = mcr2_objective(&z, &part, &cfg(4)).unwrap();
    assert!(m.abs() <= 1e-10, "objective {m}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(80))]

    #[test]
    fn gram_side_formulations_agree(seed in 0u64..10_000, d in 1usize..32, m in 1usize..32) {
        // The implementation picks the smaller Gram side; both sides must
        // agree through the commuted eigenvalue oracle.
        let mut r = rng(seed);
        let z = gaussian_matrix(&mut r, d, m);
        let rate = coding_rate_matrix(&z, &cfg(d)).unwrap();
        let alpha = d as f64 / (m as f64 * 0.5);
        let small = common::symmetric_eigenvalues(&z.gram());
        let large = common::symmetric_eigenvalues(&z.gram_t());
        let via_small: f64 =
            small.iter().map(|&l| (1.0 + alpha * l.max(0.0)).ln()).sum::<f64>() * 0.5;
        let via_large: f64 =
            large.iter().map(|&l| (1.0 + alpha * l.max(0.0)).ln()).sum::<f64>() * 0.5;
        prop_assert!((via_small - via_large).abs() <= 1e-9);
        prop_assert!((rate - via_small).abs() <= 1e-9);
        prop_assert!(rate >= -1e-12);
    }

    #[test]
    fn penalty_equals_trace_identity(seed in 0u64..10_000, d in 2usize..12, m in 2usize..24) {
        let mut r = rng(seed);
        let z = random_features(&mut r, d, m);
        let labels = random_labels(&mut r, m, 3);
        let part = MembershipPartition::from_labels(&labels, 3).unwrap();
        let projectors = random_projectors(&mut r, d, 3);

        let mut blocks = Vec::new();
        for k in 0..3 {
            blocks.push(z.select_columns(part.class_indices(k)));
        }
        let penalty = projection_penalty(&blocks, &projectors).unwrap();

        // trace((I−P_k) Z_k Z_k^T) summed over classes.
        let mut trace_total = 0.0;
        for k in 0..3 {
            let zk = blocks[k].matrix();
            if zk.cols() == 0 {
                continue;
            }
            let resid = projectors[k].residual(zk).unwrap();
            let prod = resid.matmul(&zk.transpose()).unwrap();
            for i in 0..d {
                trace_total += prod.get(i, i);
            }
        }
        prop_assert!((penalty - trace_total).abs() <= 1e-10);

        // And the residual-energy helper agrees per class.
        let per_class = residual_energy_per_class(z.matrix(), &part, &projectors).unwrap();
        prop_assert!((penalty - per_class.iter().sum::<f64>()).abs() <= 1e-10);
    }
}

#[test]
fn local_loss_recomposes_from_parts_on_seeded_instance() {
    let mut r = rng(5);
    let z = random_features(&mut r, 6, 12);
    let labels = random_labels(&mut r, 12, 3);
    let part = MembershipPartition::from_labels(&labels, 3).unwrap();
    let projectors = random_projectors(&mut r, 6, 3);
    let v = local_loss(&z, &part, &projectors, 2.5, &cfg(6)).unwrap();
    let recomposed = v.rate_compress - v.rate_expand + v.lambda * v.projection_penalty;
    assert!((v.total - recomposed).abs() <= 1e-12);

    // λ=0 total is the negated objective.
    let v0 = local_loss(&z, &part, &projectors, 0.0, &cfg(6)).unwrap();
    let m = mcr2_objective(&z, &part, &cfg(6)).unwrap();
    assert!((v0.total + m).abs() <= 1e-12);
}

fn loss_scalar(
    z: &Mat,
    labels: &[usize],
    k: usize,
    projectors: &[ProjectionOperator<f64>],
    lambda: f64,
    d: usize,
) -> f64 {
    // Finite differences perturb entries off the unit sphere, so evaluate
    // the loss on the raw matrix (the analytic gradient is defined for
    // arbitrary Z; the unit-norm invariant is a training-time constraint).
    let part = MembershipPartition::from_labels(labels, k).unwrap();
    let rate = coding_rate_matrix(z, &cfg(d)).unwrap();
    let class = cdl_mvp::rate::class_coding_rate_matrix(z, &part, &cfg(d)).unwrap();
    let mut penalty = 0.0;
    for kk in 0..k {
        let idx = part.class_indices(kk);
        if idx.is_empty() {
            continue;
        }
        let zk = z.select_columns(idx);
        let resid = projectors[kk].residual(&zk).unwrap();
        penalty += resid.frobenius_norm().powi(2);
    }
    class - rate + lambda * penalty
}

#[test]
fn gradient_matches_central_differences_on_seeded_instance() {
    let d = 4;
    let mut r = rng(11);
    let z = random_features(&mut r, d, 6);
    let labels = random_labels(&mut r, 6, 2);
    let part = MembershipPartition::from_labels(&labels, 2).unwrap();
    let projectors = random_projectors(&mut r, d, 2);
    let lambda = 1.7;

    let analytic = local_loss_gradient(&z, &part, &projectors, lambda, &cfg(d)).unwrap();
    let fd = finite_difference_gradient(z.matrix(), 1e-5, |m| {
        loss_scalar(m, &labels, 2, &projectors, lambda, d)
    });
    let err = relative_max_error(&analytic, &fd);
    assert!(err <= 1e-5, "relative error {err}");
}

#[test]
fn gradient_matches_central_differences_across_seeds() {
    for seed in 0..20u64 {
        use rand::Rng;
        let mut r = rng(1000 + seed);
        let d = r.random_range(3..8);
        let m = r.random_range(4..10);
        let k = r.random_range(1..4);
        let z = random_features(&mut r, d, m);
        let labels = random_labels(&mut r, m, k);
        let part = MembershipPartition::from_labels(&labels, k).unwrap();
        let projectors = random_projectors(&mut r, d, k);
        let lambda = r.random::<f64>() * 3.0;
        let analytic = local_loss_gradient(&z, &part, &projectors, lambda, &cfg(d)).unwrap();
        let fd = finite_difference_gradient(z.matrix(), 1e-5, |mm| {
            loss_scalar(mm, &labels, k, &projectors, lambda, d)
        });
        let err = relative_max_error(&analytic, &fd);
        assert!(err <= 1e-5, "seed {seed}: relative error {err}");
    }
}

#[test]
fn penalty_gradient_block_vanishes_inside_the_subspace() {
    // Features built inside each projector's range: the penalty gradient
    // contributes nothing, so the λ-dependence disappears.
    let d = 5;
    let mut r = rng(31);
    let g = gaussian_matrix(&mut r, d, 3);
    let basis = truncate_basis(&thin_svd(&g).unwrap(), 2).unwrap();
    let proj = projector_from_basis(&basis);
    let coeffs = gaussian_matrix(&mut r, 2, 6);
    let inside = basis.matrix().matmul(&coeffs).unwrap();
    let z = FeatureMatrix::from_normalized(&inside);
    let labels = vec![0; 6];
    let part = MembershipPartition::from_labels(&labels, 1).unwrap();
    let g_zero = local_loss_gradient(&z, &part, &[proj.clone()], 0.0, &cfg(d)).unwrap();
    let g_big = local_loss_gradient(&z, &part, &[proj], 50.0, &cfg(d)).unwrap();
    let diff = g_zero.add_scaled(&g_big, -1.0).unwrap();
    assert!(diff.max_abs() <= 1e-10);
}

#[test]
fn single_class_gradient_is_zero() {
    let mut r = rng(17);
    let z = random_features(&mut r, 5, 9);
    let part = MembershipPartition::from_labels(&[0; 9], 1).unwrap();
    let g = local_loss_gradient(
        &z,
        &part,
        &[ProjectionOperator::identity(5)],
        0.0,
        &cfg(5),
    )
    .unwrap();
    assert!(g.max_abs() <= 1e-10, "max {}", g.max_abs());
}
