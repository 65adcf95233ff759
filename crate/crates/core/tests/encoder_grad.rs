//! End-to-end encoder gradient checks against finite differences over the
//! parameters, monitored direct-feature descent, and checkpoint files.

mod common;

use cdl_mvp::encoder::{
    backward, direct_feature_step, forward, init_encoder, load_params, save_params,
    EncoderParams,
};
use cdl_mvp::linalg::ProjectionOperator;
use cdl_mvp::rate::{
    local_loss, local_loss_gradient, mcr2_objective, MembershipPartition, RateConfig,
};
use common::{gaussian_matrix, random_labels, rng, Mat};

fn cfg(d: usize) -> RateConfig<f64> {
    RateConfig::new(0.5, d).unwrap()
}

/// Loss of the encoder's output on a batch, as a scalar function of the
/// parameters (identity projectors, so only the rate terms are active).
fn encoder_loss(
    params: &EncoderParams<f64>,
    x: &Mat,
    part: &MembershipPartition,
    projectors: &[ProjectionOperator<f64>],
    lambda: f64,
) -> f64 {
    let z = forward(params, x).unwrap();
    local_loss(&z, part, projectors, lambda, &cfg(z.feature_dim()))
        .unwrap()
        .total
}

#[test]
fn parameter_gradient_matches_central_differences() {
    for seed in 0..10u64 {
        let d = 3;
        let batch = 4;
        let mut r = rng(17 + seed);
        let params = init_encoder::<f64>(&[4, 5, d], 170 + seed).unwrap();
        let x = gaussian_matrix(&mut r, 4, batch);
        let labels = random_labels(&mut r, batch, 2);
        let part = MembershipPartition::from_labels(&labels, 2).unwrap();
        let projectors = vec![ProjectionOperator::identity(d); 2];
        let lambda = 0.8;

        let z = forward(&params, &x).unwrap();
        let upstream = local_loss_gradient(&z, &part, &projectors, lambda, &cfg(d)).unwrap();
        let analytic = backward(&params, &x, &upstream).unwrap();

        // Central differences are invalid for the handful of entries whose
        // stencil straddles a rectifier kink; those are detected by
        // disagreeing one-sided slopes and excluded (their count is
        // asserted small).
        let h = 1e-5;
        let base = encoder_loss(&params, &x, &part, &projectors, lambda);
        let mut max_err = 0.0f64;
        let mut max_ref = 0.0f64;
        let mut checked = 0usize;
        let mut kinks = 0usize;
        let mut check = |plus: EncoderParams<f64>, minus: EncoderParams<f64>, an: f64| {
            let fp = encoder_loss(&plus, &x, &part, &projectors, lambda);
            let fm = encoder_loss(&minus, &x, &part, &projectors, lambda);
            let forward_slope = (fp - base) / h;
            let backward_slope = (base - fm) / h;
            let scale = forward_slope.abs().max(backward_slope.abs()).max(1.0);
            checked += 1;
            if (forward_slope - backward_slope).abs() > 1e-3 * scale {
                kinks += 1;
                return;
            }
            let fd = (fp - fm) / (2.0 * h);
            max_err = max_err.max((an - fd).abs());
            max_ref = max_ref.max(fd.abs());
        };
        for l in 0..params.layers().len() {
            let (rows, cols) = (
                params.layers()[l].weight.rows(),
                params.layers()[l].weight.cols(),
            );
            for c in 0..cols {
                for row in 0..rows {
                    let v = params.layers()[l].weight.get(row, c);
                    let mut lp = params.layers().to_vec();
                    lp[l].weight.set(row, c, v + h);
                    let mut lm = params.layers().to_vec();
                    lm[l].weight.set(row, c, v - h);
                    check(
                        EncoderParams::new(lp).unwrap(),
                        EncoderParams::new(lm).unwrap(),
                        analytic.layers[l].weight.get(row, c),
                    );
                }
            }
            for b in 0..params.layers()[l].bias.len() {
                let mut lp = params.layers().to_vec();
                lp[l].bias[b] += h;
                let mut lm = params.layers().to_vec();
                lm[l].bias[b] -= h;
                check(
                    EncoderParams::new(lp).unwrap(),
                    EncoderParams::new(lm).unwrap(),
                    analytic.layers[l].bias[b],
                );
            }
        }
        let rel = max_err / max_ref.max(1.0);
        assert!(rel <= 1e-4, "seed {seed}: relative error {rel}");
        assert!(
            kinks * 10 <= checked,
            "seed {seed}: {kinks} kink entries of {checked}"
        );
    }
}

#[test]
fn direct_descent_increases_the_objective_monotonically() {
    // Gradient descent on R^c − R is ascent on the objective M; over 100
    // monitored steps at most 5% may regress (step-size noise).
    let d = 8;
    let m = 24;
    let mut r = rng(42);
    let mut z = cdl_mvp::Features::from_normalized(&gaussian_matrix(&mut r, d, m));
    let labels: Vec<usize> = (0..m).map(|j| j % 2).collect();
    let part = MembershipPartition::from_labels(&labels, 2).unwrap();
    let projectors = vec![ProjectionOperator::identity(d); 2];

    let mut values = Vec::with_capacity(101);
    values.push(mcr2_objective(&z, &part, &cfg(d)).unwrap());
    for _ in 0..100 {
        let grad = local_loss_gradient(&z, &part, &projectors, 0.0, &cfg(d)).unwrap();
        z = direct_feature_step(&z, &grad, 0.05).unwrap();
        values.push(mcr2_objective(&z, &part, &cfg(d)).unwrap());
    }
    let regressions = values
        .windows(2)
        .filter(|w| w[1] < w[0] - 1e-12)
        .count();
    assert!(
        regressions <= 5,
        "{regressions} regressions over 100 steps; first {} last {}",
        values[0],
        values.last().unwrap()
    );
    assert!(values.last().unwrap() > &values[0]);
}

#[test]
fn checkpoint_file_round_trips() {
    let params = init_encoder::<f64>(&[6, 8, 4], 99).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.mcrp");
    save_params(&params, &path).unwrap();
    let loaded: EncoderParams<f64> = load_params(&path).unwrap();
    for (a, b) in params.layers().iter().zip(loaded.layers()) {
        assert_eq!(a.weight.data(), b.weight.data());
        assert_eq!(a.bias, b.bias);
    }
    // Truncated file rejected.
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_params::<f64>(&path).is_err());
}
