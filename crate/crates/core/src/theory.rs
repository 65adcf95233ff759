//! Numerical certification of the governing inequalities: the trace bound
//! on the coding-rate change under projection, rate monotonicity under a
//! single orthogonal projection, and consistency of SVD basis fusion with
//! the explicit constant `√(2N)·L/β`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fusion::fuse_bases;
use crate::linalg::{
    grassmann_distance, orthonormalize_columns, projector_from_basis, DenseMatrix,
    OrthonormalBasis, ProjectionOperator,
};
use crate::rate::{
    class_coding_rate_matrix, coding_rate_matrix, FeatureMatrix, MembershipPartition, RateConfig,
};
use crate::scalar::Scalar;
use crate::synth::generate_ground_truth;
use crate::util::{derive_seed, tag};

/// Projection residual energy `‖(I − P) Z‖_F²`.
pub fn residual_energy<S: Scalar>(
    z: &DenseMatrix<S>,
    projector: &ProjectionOperator<S>,
) -> Result<S> {
    let resid = projector.residual(z)?;
    let n = resid.frobenius_norm();
    Ok(n * n)
}

/// Per-class residual energies under per-class projectors; the block
/// structure makes their sum the residual energy of the whole partition.
pub fn residual_energy_per_class<S: Scalar>(
    z: &DenseMatrix<S>,
    part: &MembershipPartition,
    projectors: &[ProjectionOperator<S>],
) -> Result<Vec<S>> {
    if projectors.len() != part.class_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} projectors for {} classes",
            projectors.len(),
            part.class_count()
        )));
    }
    let mut out = Vec::with_capacity(part.class_count());
    for k in 0..part.class_count() {
        let idx = part.class_indices(k);
        if idx.is_empty() {
            out.push(S::zero());
            continue;
        }
        let zk = z.select_columns(idx);
        out.push(residual_energy(&zk, &projectors[k])?);
    }
    Ok(out)
}

/// Certificate for one feature set: the rate-reduction difference under
/// per-class projection against its residual-energy bound.
#[derive(Debug, Clone)]
pub struct TraceBoundReport<S> {
    pub objective: S,
    pub objective_projected: S,
    pub difference: S,
    pub residual_total: S,
    pub residual_per_class: Vec<S>,
    pub bound: S,
    /// `bound − |difference|`; non-negative when the bound holds.
    pub slack: S,
}

impl<S: Scalar> TraceBoundReport<S> {
    /// Bound holds up to the stated relative tolerance.
    pub fn holds(&self, rel_tol: S) -> bool {
        self.slack >= -rel_tol * self.bound.max(S::one())
    }
}

/// Evaluates the rate-reduction objective on the features and on their
/// per-class projections, and compares the difference to
/// `(d/(m ε²))·(ε_total + Σ_k ε_k)`.
pub fn check_trace_bound<S: Scalar>(
    z: &FeatureMatrix<S>,
    part: &MembershipPartition,
    projectors: &[ProjectionOperator<S>],
    cfg: &RateConfig<S>,
) -> Result<TraceBoundReport<S>> {
    let zm = z.matrix();
    if part.sample_count() != zm.cols() {
        return Err(Error::DimensionMismatch(
            "partition/sample count mismatch".into(),
        ));
    }
    let residual_per_class = residual_energy_per_class(zm, part, projectors)?;
    let residual_total: S = residual_per_class.iter().copied().sum();

    // Projected features, class block by class block.
    let mut projected = zm.clone();
    for k in 0..part.class_count() {
        let idx = part.class_indices(k);
        if idx.is_empty() {
            continue;
        }
        let zk = zm.select_columns(idx);
        let pk = projectors[k].apply(&zk)?;
        projected.set_columns(idx, &pk);
    }

    let objective =
        coding_rate_matrix(zm, cfg)? - class_coding_rate_matrix(zm, part, cfg)?;
    let objective_projected = coding_rate_matrix(&projected, cfg)?
        - class_coding_rate_matrix(&projected, part, cfg)?;
    let difference = (objective - objective_projected).abs();

    let m = S::from_usize(zm.cols()).unwrap();
    let d = S::from_usize(cfg.feature_dim).unwrap();
    let scale = d / (m * cfg.epsilon_sq);
    let bound = scale * residual_total + scale * residual_total;
    Ok(TraceBoundReport {
        objective,
        objective_projected,
        difference,
        residual_total,
        residual_per_class,
        bound,
        slack: bound - difference,
    })
}

/// Values of a single rate-monotonicity check `R(P Z) ≤ R(Z)`.
#[derive(Debug, Clone)]
pub struct RateMonotonicity<S> {
    pub rate: S,
    pub rate_projected: S,
}

impl<S: Scalar> RateMonotonicity<S> {
    pub fn holds(&self, tol: S) -> bool {
        self.rate_projected <= self.rate + tol
    }
}

/// Whole-space rate before and after projecting every feature with one
/// orthogonal projection.
pub fn check_rate_monotonicity<S: Scalar>(
    z: &DenseMatrix<S>,
    projector: &ProjectionOperator<S>,
    cfg: &RateConfig<S>,
) -> Result<RateMonotonicity<S>> {
    let projected = projector.apply(z)?;
    Ok(RateMonotonicity {
        rate: coding_rate_matrix(z, cfg)?,
        rate_projected: coding_rate_matrix(&projected, cfg)?,
    })
}

/// One randomized instance for the certification suites.
pub struct RandomInstance<S> {
    pub features: FeatureMatrix<S>,
    pub partition: MembershipPartition,
    pub projectors: Vec<ProjectionOperator<S>>,
    pub config: RateConfig<S>,
}

fn gaussian<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix<S> {
    DenseMatrix::from_fn(rows, cols, |_, _| {
        S::of(rng.sample::<f64, _>(StandardNormal))
    })
}

/// Random unit-norm features, random labels, random rank-deficient
/// projectors; dimensions bounded by `max_dim`, `max_samples`,
/// `max_classes`.
pub fn random_instance<S: Scalar>(
    max_dim: usize,
    max_samples: usize,
    max_classes: usize,
    epsilon_sq: S,
    seed: u64,
) -> Result<RandomInstance<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..=max_dim);
    let m = rng.random_range(2..=max_samples);
    let k = rng.random_range(1..=max_classes);
    let features = FeatureMatrix::from_normalized(&gaussian(&mut rng, d, m));
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
    let partition = MembershipPartition::from_labels(&labels, k)?;
    let mut projectors = Vec::with_capacity(k);
    for _ in 0..k {
        let rank = rng.random_range(1..d.max(2));
        let basis = loop {
            if let Ok(b) = orthonormalize_columns(&gaussian::<S>(&mut rng, d, rank)) {
                break b;
            }
        };
        projectors.push(projector_from_basis(&basis));
    }
    Ok(RandomInstance {
        features,
        partition,
        projectors,
        config: RateConfig::new(epsilon_sq, d)?,
    })
}

/// Summary of a randomized trace-bound certification run.
#[derive(Debug, Clone)]
pub struct TraceSuiteSummary {
    pub instances: usize,
    pub min_relative_slack: f64,
    pub violations: usize,
}

/// Runs `count` random instances through `check_trace_bound`.
pub fn trace_bound_suite<S: Scalar>(count: usize, seed: u64) -> Result<TraceSuiteSummary> {
    let mut min_rel = f64::INFINITY;
    let mut violations = 0;
    for i in 0..count {
        let inst: RandomInstance<S> = random_instance(
            16,
            64,
            4,
            S::of(0.5),
            derive_seed(seed, &[tag("trace"), i as u64]),
        )?;
        let report = check_trace_bound(
            &inst.features,
            &inst.partition,
            &inst.projectors,
            &inst.config,
        )?;
        let rel =
            report.slack.to_f64_lossy() / report.bound.to_f64_lossy().max(1.0);
        min_rel = min_rel.min(rel);
        if !report.holds(S::of(1e-8)) {
            violations += 1;
        }
    }
    Ok(TraceSuiteSummary {
        instances: count,
        min_relative_slack: min_rel,
        violations,
    })
}

/// Summary of a randomized monotonicity certification run. Each instance
/// checks the pooled features and every class block against every
/// projector in the instance.
#[derive(Debug, Clone)]
pub struct MonotonicitySuiteSummary {
    pub instances: usize,
    pub checks: usize,
    pub max_violation: f64,
    pub violations: usize,
}

pub fn monotonicity_suite<S: Scalar>(count: usize, seed: u64) -> Result<MonotonicitySuiteSummary> {
    let tol = S::of(1e-10);
    let mut checks = 0;
    let mut violations = 0;
    let mut max_violation = 0.0f64;
    for i in 0..count {
        let inst: RandomInstance<S> = random_instance(
            16,
            64,
            4,
            S::of(0.5),
            derive_seed(seed, &[tag("mono"), i as u64]),
        )?;
        let zm = inst.features.matrix();
        let mut targets: Vec<DenseMatrix<S>> = vec![zm.clone()];
        for k in 0..inst.partition.class_count() {
            let idx = inst.partition.class_indices(k);
            if !idx.is_empty() {
                targets.push(zm.select_columns(idx));
            }
        }
        for target in &targets {
            for p in &inst.projectors {
                let r = check_rate_monotonicity(target, p, &inst.config)?;
                checks += 1;
                let excess = (r.rate_projected - r.rate).to_f64_lossy();
                max_violation = max_violation.max(excess);
                if !r.holds(tol) {
                    violations += 1;
                }
            }
        }
    }
    Ok(MonotonicitySuiteSummary {
        instances: count,
        checks,
        max_violation,
        violations,
    })
}

/// Configuration of the fusion-consistency experiment.
#[derive(Debug, Clone)]
pub struct ConsistencyConfig {
    pub agents: usize,
    pub ambient_dim: usize,
    pub global_rank: usize,
    pub agent_rank: usize,
    pub noise_grid: Vec<f64>,
    pub trials: usize,
    pub beta_min: f64,
    pub seed: u64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            agents: 4,
            ambient_dim: 32,
            global_rank: 8,
            agent_rank: 4,
            noise_grid: vec![1e-3, 3e-3, 1e-2, 3e-2, 1e-1],
            trials: 50,
            beta_min: 0.2,
            seed: 13,
        }
    }
}

/// Per-noise-level statistics.
#[derive(Debug, Clone)]
pub struct ConsistencyLevel {
    pub delta: f64,
    pub median_distance: f64,
    pub max_distance: f64,
    /// Largest `d_Gr / bound` ratio over the level's trials.
    pub worst_bound_ratio: f64,
}

/// Outcome of the fusion-consistency experiment.
#[derive(Debug, Clone)]
pub struct ConsistencyReport {
    pub levels: Vec<ConsistencyLevel>,
    /// Sup over trials of measured `‖sinΘ‖ / Δ` (≈ 1 by construction).
    pub max_l: f64,
    /// Smallest achieved coverage singular value across trials.
    pub min_beta: f64,
    /// Largest proof constant `√(2N)·L/β` across trials.
    pub max_constant: f64,
    pub log_log_slope: f64,
    pub all_within_bound: bool,
    /// Max distance at Δ = 0 (exact-recovery check).
    pub zero_noise_max_distance: f64,
}

/// Rotates each basis column by the same principal angle toward a random
/// orthogonal complement, so `‖sinΘ(perturbed, basis)‖ = delta` exactly
/// (up to roundoff) and the matrix perturbation stays `O(delta)`.
fn geodesic_perturb<S: Scalar>(
    basis: &OrthonormalBasis<S>,
    delta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<OrthonormalBasis<S>> {
    if delta == 0.0 {
        return Ok(basis.clone());
    }
    let d = basis.dim_ambient();
    let r = basis.dim_subspace();
    if d < 2 * r {
        return Err(Error::ConfigError(format!(
            "need ambient dim >= 2·rank for a geodesic step, got {d} < {}",
            2 * r
        )));
    }
    let theta = S::of(delta.asin());
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    // Random orthonormal W with W^T U = 0.
    let w = loop {
        let g = gaussian::<S>(rng, d, r);
        let proj = basis.project(&g)?;
        let off = g.add_scaled(&proj, -S::one())?;
        if let Ok(b) = orthonormalize_columns(&off) {
            break b;
        }
    };
    let stepped = basis
        .matrix()
        .scale(cos_t)
        .add_scaled(w.matrix(), sin_t)?;
    OrthonormalBasis::new(stepped)
}

/// Builds ground truth per trial, perturbs every agent's population basis
/// by a controlled principal angle, fuses, and compares the fused subspace
/// to the global one against the proof bound.
pub fn fusion_consistency_experiment<S: Scalar>(
    cfg: &ConsistencyConfig,
) -> Result<ConsistencyReport> {
    if cfg.agent_rank * cfg.agents < cfg.global_rank {
        return Err(Error::CoverageInfeasible {
            required: cfg.global_rank,
            available: cfg.agent_rank * cfg.agents,
        });
    }
    let agent_ranks = vec![cfg.agent_rank; cfg.agents];
    let mut levels = Vec::with_capacity(cfg.noise_grid.len());
    let mut max_l = 0.0f64;
    let mut min_beta = f64::INFINITY;
    let mut max_constant = 0.0f64;
    let mut all_within = true;

    let run_trial = |delta: f64, trial_seed: u64| -> Result<(f64, f64, f64, f64)> {
        let gt: crate::synth::GroundTruth<S> = generate_ground_truth(
            cfg.ambient_dim,
            &[cfg.global_rank],
            &agent_ranks,
            S::of(cfg.beta_min),
            trial_seed,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(trial_seed, &[tag("perturb")]));
        let mut blocks = Vec::with_capacity(cfg.agents);
        let mut l_measured = 0.0f64;
        for base in &gt.agent_bases {
            let perturbed = geodesic_perturb(base, delta, &mut rng)?;
            if delta > 0.0 {
                let sin_theta = grassmann_distance(base, &perturbed)?.to_f64_lossy();
                l_measured = l_measured.max(sin_theta / delta);
            }
            blocks.push(perturbed);
        }
        let mats: Vec<&DenseMatrix<S>> = blocks.iter().map(|b| b.matrix()).collect();
        let concat = DenseMatrix::hstack(&mats)?;
        let fused = fuse_bases(&concat, cfg.global_rank)?;
        let distance = grassmann_distance(&fused.basis, &gt.global_basis)?.to_f64_lossy();
        Ok((distance, l_measured, gt.beta.to_f64_lossy(), delta))
    };

    for (li, &delta) in cfg.noise_grid.iter().enumerate() {
        let mut distances = Vec::with_capacity(cfg.trials);
        let mut worst_ratio = 0.0f64;
        for t in 0..cfg.trials {
            let trial_seed = derive_seed(cfg.seed, &[tag("level"), li as u64, t as u64]);
            let (distance, l_measured, beta, delta) = run_trial(delta, trial_seed)?;
            let n = cfg.agents as f64;
            let constant = (2.0 * n).sqrt() * l_measured / beta;
            let bound = constant * delta;
            max_l = max_l.max(l_measured);
            min_beta = min_beta.min(beta);
            max_constant = max_constant.max(constant);
            if distance > bound {
                all_within = false;
            }
            worst_ratio = worst_ratio.max(if bound > 0.0 { distance / bound } else { 0.0 });
            distances.push(distance);
        }
        distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if distances.len() % 2 == 1 {
            distances[distances.len() / 2]
        } else {
            0.5 * (distances[distances.len() / 2 - 1] + distances[distances.len() / 2])
        };
        levels.push(ConsistencyLevel {
            delta,
            median_distance: median,
            max_distance: *distances.last().unwrap(),
            worst_bound_ratio: worst_ratio,
        });
    }

    // Exact recovery at zero perturbation.
    let mut zero_max = 0.0f64;
    for t in 0..cfg.trials.clamp(1, 5) {
        let trial_seed = derive_seed(cfg.seed, &[tag("zero"), t as u64]);
        let (distance, _, _, _) = run_trial(0.0, trial_seed)?;
        zero_max = zero_max.max(distance);
    }

    // Least-squares slope of log median distance against log delta.
    let pts: Vec<(f64, f64)> = levels
        .iter()
        .filter(|l| l.delta > 0.0 && l.median_distance > 0.0)
        .map(|l| (l.delta.ln(), l.median_distance.ln()))
        .collect();
    let slope = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        (n * sxy - sx * sy) / (n * sxx - sx * sx)
    } else {
        f64::NAN
    };

    Ok(ConsistencyReport {
        levels,
        max_l,
        min_beta,
        max_constant,
        log_log_slope: slope,
        all_within_bound: all_within,
        zero_noise_max_distance: zero_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::projector_from_basis;

    #[test]
    fn residual_energy_cases() {
        // Features inside the projector range: zero.
        let u = OrthonormalBasis::new(DenseMatrix::new(3, 1, vec![1.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let p = projector_from_basis(&u);
        let inside = DenseMatrix::new(3, 2, vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
        assert!(residual_energy(&inside, &p).unwrap() < 1e-15);

        // Identity projector: zero residual for anything.
        let id = ProjectionOperator::identity(3);
        assert_eq!(residual_energy(&inside, &id).unwrap(), 0.0);

        // Rank-zero projector on unit columns: residual is the sample count.
        let zero = ProjectionOperator::zero(3);
        let unit = FeatureMatrix::from_normalized(&DenseMatrix::from_fn(3, 4, |r, c| {
            (r + c) as f64 + 1.0
        }));
        let e = residual_energy(unit.matrix(), &zero).unwrap();
        assert!((e - 4.0).abs() < 1e-12);
    }

    #[test]
    fn residual_equals_trace_identity() {
        // ‖(I−P)Z‖_F² = trace((I−P) Z Z^T) for random-ish inputs.
        let u = OrthonormalBasis::new(
            DenseMatrix::from_fn(4, 2, |r, c| if r == c { 1.0 } else { 0.0 }),
        )
        .unwrap();
        let p = projector_from_basis(&u);
        let z = DenseMatrix::from_fn(4, 5, |r, c| ((r * 3 + c) % 7) as f64 * 0.3 - 0.8);
        let e = residual_energy(&z, &p).unwrap();
        let resid = p.residual(&z).unwrap();
        let gram = resid.matmul(&z.transpose()).unwrap();
        let mut trace = 0.0;
        for i in 0..4 {
            trace += gram.get(i, i);
        }
        assert!((e - trace).abs() < 1e-10);
    }

    #[test]
    fn identity_projectors_give_zero_difference_and_bound() {
        let z = FeatureMatrix::from_normalized(&DenseMatrix::from_fn(4, 6, |r, c| {
            ((r + 2 * c) % 5) as f64 - 2.0
        }));
        let part = MembershipPartition::from_labels(&[0, 1, 0, 1, 0, 1], 2).unwrap();
        let projectors = vec![
            ProjectionOperator::identity(4),
            ProjectionOperator::identity(4),
        ];
        let cfg = RateConfig::new(0.5, 4).unwrap();
        let r = check_trace_bound(&z, &part, &projectors, &cfg).unwrap();
        assert!(r.difference < 1e-12);
        assert!(r.bound < 1e-12);
        assert!(r.holds(1e-8));
    }

    #[test]
    fn monotonicity_holds_at_extremes() {
        let z = DenseMatrix::from_fn(3, 4, |r, c| (r as f64 - 1.0) * 0.4 + c as f64 * 0.1);
        let cfg = RateConfig::new(0.5, 3).unwrap();
        let id = ProjectionOperator::identity(3);
        let r = check_rate_monotonicity(&z, &id, &cfg).unwrap();
        assert!((r.rate - r.rate_projected).abs() < 1e-12);

        let line_basis = OrthonormalBasis::new(
            DenseMatrix::new(3, 1, vec![0.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let p = projector_from_basis(&line_basis);
        let r = check_rate_monotonicity(&z, &p, &cfg).unwrap();
        assert!(r.holds(1e-10));

        // Rank-zero projection kills everything: R(0) = 0 <= R(Z).
        let r = check_rate_monotonicity(&z, &ProjectionOperator::zero(3), &cfg).unwrap();
        assert_eq!(r.rate_projected, 0.0);
        assert!(r.holds(1e-10));
    }

    #[test]
    fn small_suites_pass() {
        let t = trace_bound_suite::<f64>(20, 99).unwrap();
        assert_eq!(t.violations, 0, "min rel slack {}", t.min_relative_slack);
        let m = monotonicity_suite::<f64>(20, 101).unwrap();
        assert_eq!(m.violations, 0, "max violation {}", m.max_violation);
    }

    #[test]
    fn zero_perturbation_recovers_exactly() {
        let cfg = ConsistencyConfig {
            trials: 3,
            noise_grid: vec![1e-2],
            ..Default::default()
        };
        let report = fusion_consistency_experiment::<f64>(&cfg).unwrap();
        assert!(report.zero_noise_max_distance < 1e-10);
        assert!(report.all_within_bound);
    }

    #[test]
    fn single_full_rank_agent_passes_delta_through() {
        // One agent with full rank: fusion is that agent's basis, so the
        // distance equals the injected perturbation.
        let cfg = ConsistencyConfig {
            agents: 1,
            ambient_dim: 16,
            global_rank: 4,
            agent_rank: 4,
            noise_grid: vec![0.05],
            trials: 10,
            beta_min: 0.0,
            seed: 7,
        };
        let report = fusion_consistency_experiment::<f64>(&cfg).unwrap();
        let level = &report.levels[0];
        assert!((level.median_distance - 0.05).abs() < 0.005);
    }
}
