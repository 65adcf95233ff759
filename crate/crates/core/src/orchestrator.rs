//! Round-based multi-agent training: initialization, per-round basis
//! fusion, inner gradient steps per agent, basis extraction and broadcast,
//! λ scheduling, early stopping, and full-run determinism.
//!
//! Determinism contract: all per-agent work inside a round is a pure
//! function of `(config, dataset, seed, round, agent)`; results are
//! collected in agent order, so round records are byte-identical across
//! thread counts.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    backward, direct_feature_step, forward, init_encoder, optimizer_step, read_params,
    write_params, EncoderParams, OptMethod, OptimizerState,
};
use crate::error::{Error, Result};
use crate::fusion::{
    concatenate_bases, extract_local_basis, fuse_bases, serialize_basis, BasisMessage,
    FusionConfig,
};
use crate::linalg::{projector_from_basis, subspace_containment, DenseMatrix, OrthonormalBasis, ProjectionOperator};
use crate::rate::{local_loss, local_loss_gradient, FeatureMatrix, MembershipPartition, RateConfig};
use crate::scalar::Scalar;
use crate::synth::{GroundTruth, MultiViewDataset};
use crate::theory::check_trace_bound;
use crate::util::{derive_seed, read_u16_le, read_u32_le, tag, write_u16_le, write_u32_le};

const CHECKPOINT_MAGIC: &[u8; 4] = b"MCRK";
const CHECKPOINT_VERSION: u16 = 1;

/// Training mode: encoder networks or free feature matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Encoder,
    Direct,
}

/// One λ-schedule stage: `value` applies from `round` onward.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LambdaStage {
    pub round: usize,
    pub value: f64,
}

/// Run configuration. Loaded from the `[run]` table of a TOML config
/// file; every field has a default so minimal configs work.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Expected agent count; 0 accepts whatever the dataset provides.
    pub agents: usize,
    /// Expected class count; 0 accepts whatever the dataset provides.
    pub classes: usize,
    pub feature_dim: usize,
    /// Per-class rank leaving each agent (p_k).
    pub local_rank: usize,
    /// Per-class rank after fusion (P_k).
    pub fused_rank: usize,
    pub epsilon_sq: f64,
    /// Empty means the default schedule: 1.0 until 2/3 of the rounds,
    /// then 100.0.
    pub lambda_schedule: Vec<LambdaStage>,
    /// Inner gradient steps per round. Absent means one pass over the
    /// data (⌈m/batch⌉ steps); an explicit 0 runs no steps, so a round
    /// only refreshes the fusion.
    pub inner_steps: Option<usize>,
    pub batch_size: usize,
    pub rounds: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// "adam" or "sgd".
    pub optimizer: String,
    pub mode: Mode,
    /// Hidden layer widths of the encoders.
    pub hidden_dims: Vec<usize>,
    pub seed: u64,
    /// Worker threads for per-agent training; 0 = one per agent. Must not
    /// change results.
    pub threads: usize,
    /// Stop when the total loss changes by less than this relative amount
    /// over `early_stop_window` rounds.
    pub early_stop_tol: f64,
    pub early_stop_window: usize,
    /// Write a checkpoint every this many rounds (0 = only at the end).
    pub checkpoint_every: usize,
    /// Also dump the exchanged basis messages per round.
    pub dump_messages: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            agents: 0,
            classes: 0,
            feature_dim: 16,
            local_rank: 4,
            fused_rank: 6,
            epsilon_sq: 0.5,
            lambda_schedule: Vec::new(),
            inner_steps: None,
            batch_size: 128,
            rounds: 45,
            learning_rate: 0.05,
            weight_decay: 1e-5,
            optimizer: "adam".into(),
            mode: Mode::Direct,
            hidden_dims: vec![64, 64],
            seed: 7,
            threads: 1,
            early_stop_tol: 1e-6,
            early_stop_window: 10,
            checkpoint_every: 0,
            dump_messages: false,
        }
    }
}

impl RunConfig {
    /// Effective λ schedule: explicit stages, or the default two-phase
    /// split at 2/3 of the configured rounds.
    pub fn schedule(&self) -> Result<Vec<LambdaStage>> {
        let stages = if self.lambda_schedule.is_empty() {
            let switch = (self.rounds * 2).div_ceil(3);
            if switch == 0 {
                vec![LambdaStage {
                    round: 0,
                    value: 1.0,
                }]
            } else {
                vec![
                    LambdaStage {
                        round: 0,
                        value: 1.0,
                    },
                    LambdaStage {
                        round: switch,
                        value: 100.0,
                    },
                ]
            }
        } else {
            self.lambda_schedule.clone()
        };
        for w in stages.windows(2) {
            if w[1].round <= w[0].round {
                return Err(Error::ConfigError(
                    "lambda schedule rounds must be strictly increasing".into(),
                ));
            }
        }
        if stages.first().map(|s| s.round) != Some(0) {
            return Err(Error::ConfigError(
                "lambda schedule must start at round 0".into(),
            ));
        }
        if stages.iter().any(|s| !s.value.is_finite() || s.value < 0.0) {
            return Err(Error::ConfigError("lambda values must be >= 0".into()));
        }
        Ok(stages)
    }

    pub fn lambda_at(&self, round: usize) -> Result<f64> {
        let stages = self.schedule()?;
        Ok(stages
            .iter()
            .rev()
            .find(|s| s.round <= round)
            .map(|s| s.value)
            .unwrap_or(1.0))
    }

    fn optimizer_method(&self) -> Result<OptMethod> {
        match self.optimizer.as_str() {
            "adam" => Ok(OptMethod::Adam),
            "sgd" => Ok(OptMethod::Sgd),
            other => Err(Error::ConfigError(format!(
                "unknown optimizer {other:?}, expected \"adam\" or \"sgd\""
            ))),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.batch_size == 0 {
            return Err(Error::ConfigError(
                "feature_dim and batch_size must be positive".into(),
            ));
        }
        if self.local_rank == 0 || self.local_rank > self.feature_dim {
            return Err(Error::ConfigError(format!(
                "local_rank {} outside [1, {}]",
                self.local_rank, self.feature_dim
            )));
        }
        if self.fused_rank == 0 || self.fused_rank > self.feature_dim {
            return Err(Error::ConfigError(format!(
                "fused_rank {} outside [1, {}]",
                self.fused_rank, self.feature_dim
            )));
        }
        if !(self.epsilon_sq > 0.0) {
            return Err(Error::ConfigError("epsilon_sq must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::ConfigError("learning_rate must be positive".into()));
        }
        self.optimizer_method()?;
        self.schedule()?;
        Ok(())
    }
}

/// Model half of an agent: encoder parameters or free features.
enum AgentModel<S: Scalar> {
    Encoder {
        params: EncoderParams<S>,
        optimizer: OptimizerState<S>,
    },
    Direct(FeatureMatrix<S>),
}

/// One agent's training state.
struct AgentState<S: Scalar> {
    id: u32,
    /// Training columns of this agent's view (view_dim x m_i).
    data: DenseMatrix<S>,
    partition: MembershipPartition,
    model: AgentModel<S>,
}

impl<S: Scalar> AgentState<S> {
    fn full_features(&self) -> Result<FeatureMatrix<S>> {
        match &self.model {
            AgentModel::Encoder { params, .. } => forward(params, &self.data),
            AgentModel::Direct(z) => Ok(z.clone()),
        }
    }
}

/// Full run state across rounds.
pub struct RunState<S: Scalar> {
    pub config: RunConfig,
    agents: Vec<AgentState<S>>,
    /// Current fused basis per class (None until a class fuses once).
    fused: Vec<Option<OrthonormalBasis<S>>>,
    fused_rank_deficient: Vec<bool>,
    /// Current per-class projectors (identity before the first fusion).
    projectors: Vec<ProjectionOperator<S>>,
    /// Messages broadcast at the end of the previous round (or at init).
    inbox: Vec<BasisMessage<S>>,
    pub round: usize,
    class_count: usize,
    rate_cfg: RateConfig<S>,
    fusion_cfg: FusionConfig,
    truth: Option<GroundTruth<S>>,
}

/// Per-agent numbers recorded each round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentRecord {
    pub agent: u32,
    pub rate_expand: f64,
    pub rate_compress: f64,
    pub projection_penalty: f64,
    pub loss_total: f64,
    /// Residual energy over all classes (ε_i).
    pub residual_total: f64,
    /// Per-class residual energies (ε_{i,k}).
    pub residual_per_class: Vec<f64>,
    /// Trace-bound certificate for this round's features.
    pub trace_difference: f64,
    pub trace_bound: f64,
    pub trace_slack: f64,
    /// Per-class distance of this agent's extracted local basis to the
    /// true class subspace, when ground truth is available.
    pub local_truth_distance: Option<Vec<f64>>,
}

/// Per-class fused-basis diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusedRecord {
    pub class: usize,
    pub rank_deficient: bool,
    /// Sine of the largest principal angle of the true class subspace
    /// against the fused basis, when ground truth is available.
    pub truth_distance: Option<f64>,
}

/// One round's record. Wall time is kept out of serialization so round
/// logs stay byte-identical across thread counts and machines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub lambda: f64,
    pub total_loss: f64,
    pub agents: Vec<AgentRecord>,
    pub fused: Vec<FusedRecord>,
    #[serde(skip)]
    pub wall_ms: f64,
}

impl RoundRecord {
    /// Smallest relative trace-bound slack across agents.
    pub fn min_relative_trace_slack(&self) -> f64 {
        self.agents
            .iter()
            .map(|a| a.trace_slack / a.trace_bound.max(1.0))
            .fold(f64::INFINITY, f64::min)
    }
}

fn rank_limit_for_agent<S: Scalar>(
    cfg: &RunConfig,
    part: &MembershipPartition,
) -> Result<()> {
    for k in 0..part.class_count() {
        let mk = part.class_size(k);
        if mk > 0 && cfg.local_rank > mk.min(cfg.feature_dim) {
            return Err(Error::ConfigError(format!(
                "local_rank {} exceeds min(feature_dim, class {k} samples = {mk})",
                cfg.local_rank
            )));
        }
    }
    let _ = S::zero();
    Ok(())
}

/// Builds the initial state: encoders (or normalized raw features),
/// identity projectors, and the initial basis extraction/broadcast.
pub fn initialize_run<S: Scalar>(
    cfg: &RunConfig,
    dataset: &MultiViewDataset<S>,
    truth: Option<&GroundTruth<S>>,
) -> Result<RunState<S>> {
    cfg.validate()?;
    let n_agents = dataset.agent_count();
    if n_agents == 0 {
        return Err(Error::ConfigError("dataset has no agents".into()));
    }
    if cfg.agents != 0 && cfg.agents != n_agents {
        return Err(Error::ConfigError(format!(
            "config expects {} agents, dataset has {n_agents}",
            cfg.agents
        )));
    }
    let class_count = dataset.class_count;
    if class_count == 0 {
        return Err(Error::ConfigError("dataset has no classes".into()));
    }
    if cfg.classes != 0 && cfg.classes != class_count {
        return Err(Error::ConfigError(format!(
            "config expects {} classes, dataset has {class_count}",
            cfg.classes
        )));
    }
    if let Some(gt) = truth {
        if gt.class_count() != class_count {
            return Err(Error::ConfigError(format!(
                "ground truth has {} classes, dataset {}",
                gt.class_count(),
                class_count
            )));
        }
        if gt.ambient_dim() != cfg.feature_dim && cfg.mode == Mode::Direct {
            return Err(Error::ConfigError(format!(
                "direct mode compares against ground truth of dim {}, feature_dim is {}",
                gt.ambient_dim(),
                cfg.feature_dim
            )));
        }
    }

    let train_idx = dataset.train_indices();
    if train_idx.is_empty() {
        return Err(Error::ConfigError("dataset has no training columns".into()));
    }
    let train_labels: Vec<usize> = train_idx.iter().map(|&j| dataset.labels[j]).collect();
    let partition = MembershipPartition::from_labels(&train_labels, class_count)?;
    rank_limit_for_agent::<S>(cfg, &partition)?;

    let mut agents = Vec::with_capacity(n_agents);
    for (i, view) in dataset.views.iter().enumerate() {
        let data = view.samples.select_columns(&train_idx);
        let model = match cfg.mode {
            Mode::Encoder => {
                let mut dims = vec![data.rows()];
                dims.extend(cfg.hidden_dims.iter().copied());
                dims.push(cfg.feature_dim);
                let params = init_encoder(
                    &dims,
                    derive_seed(cfg.seed, &[tag("encoder-init"), i as u64]),
                )?;
                let optimizer = OptimizerState::new(
                    cfg.optimizer_method()?,
                    S::of(cfg.learning_rate),
                    S::of(cfg.weight_decay),
                    &params,
                );
                AgentModel::Encoder { params, optimizer }
            }
            Mode::Direct => {
                if data.rows() != cfg.feature_dim {
                    return Err(Error::ConfigError(format!(
                        "direct mode needs view_dim = feature_dim, got {} vs {}",
                        data.rows(),
                        cfg.feature_dim
                    )));
                }
                AgentModel::Direct(FeatureMatrix::from_normalized(&data))
            }
        };
        agents.push(AgentState {
            id: i as u32,
            data,
            partition: partition.clone(),
            model,
        });
    }

    let rate_cfg = RateConfig::new(S::of(cfg.epsilon_sq), cfg.feature_dim)?;
    let fusion_cfg = FusionConfig::uniform(
        cfg.feature_dim,
        class_count,
        cfg.local_rank,
        cfg.fused_rank,
    )?;

    let mut state = RunState {
        config: cfg.clone(),
        agents,
        fused: vec![None; class_count],
        fused_rank_deficient: vec![false; class_count],
        projectors: vec![ProjectionOperator::identity(cfg.feature_dim); class_count],
        inbox: Vec::new(),
        round: 0,
        class_count,
        rate_cfg,
        fusion_cfg,
        truth: truth.cloned(),
    };

    // Initial extraction and broadcast before the first round.
    state.inbox = state.broadcast(0)?;
    Ok(state)
}

impl<S: Scalar> RunState<S> {
    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    pub fn fused_basis(&self, class: usize) -> Option<&OrthonormalBasis<S>> {
        self.fused[class].as_ref()
    }

    pub fn projectors(&self) -> &[ProjectionOperator<S>] {
        &self.projectors
    }

    pub fn truth(&self) -> Option<&GroundTruth<S>> {
        self.truth.as_ref()
    }

    /// Features of every agent on its full training data.
    pub fn all_features(&self) -> Result<Vec<FeatureMatrix<S>>> {
        self.agents.iter().map(|a| a.full_features()).collect()
    }

    pub fn train_partition(&self) -> &MembershipPartition {
        &self.agents[0].partition
    }

    /// Applies an agent's trained map to new view columns.
    pub fn encode(&self, agent: usize, x: &DenseMatrix<S>) -> Result<FeatureMatrix<S>> {
        match &self.agents[agent].model {
            AgentModel::Encoder { params, .. } => forward(params, x),
            AgentModel::Direct(_) => Ok(FeatureMatrix::from_normalized(x)),
        }
    }

    /// Extracts and "broadcasts" every agent's per-class bases. Classes
    /// with no samples are skipped per the empty-class policy.
    fn broadcast(&self, round: u32) -> Result<Vec<BasisMessage<S>>> {
        let mut messages = Vec::new();
        for agent in &self.agents {
            let z = agent.full_features()?;
            for k in 0..self.class_count {
                let idx = agent.partition.class_indices(k);
                if idx.is_empty() {
                    continue;
                }
                let zk = z.select_columns(idx);
                let p_k = self.fusion_cfg.local_rank(k);
                if p_k > zk.sample_count().min(zk.feature_dim()) {
                    return Err(Error::InvalidTruncation {
                        requested: p_k,
                        available: zk.sample_count().min(zk.feature_dim()),
                    });
                }
                messages.push(extract_local_basis(&zk, p_k, agent.id, k as u32, round)?);
            }
        }
        Ok(messages)
    }

    /// Fuses the inbox per class, replacing projectors where messages
    /// exist and retaining the previous ones otherwise.
    fn fuse_round(&mut self) -> Result<()> {
        for k in 0..self.class_count {
            let class_msgs: Vec<BasisMessage<S>> = self
                .inbox
                .iter()
                .filter(|m| m.class_id == k as u32)
                .cloned()
                .collect();
            if class_msgs.is_empty() {
                continue;
            }
            let concat = concatenate_bases(&class_msgs)?;
            let fused = fuse_bases(&concat, self.fusion_cfg.fused_rank(k))?;
            self.projectors[k] = projector_from_basis(&fused.basis);
            self.fused[k] = Some(fused.basis);
            self.fused_rank_deficient[k] = fused.rank_deficient;
        }
        Ok(())
    }

    /// Inner gradient steps for one agent. Pure function of the state and
    /// the (seed, agent, round)-derived RNG stream.
    fn train_agent(
        agent: &mut AgentState<S>,
        cfg: &RunConfig,
        rate_cfg: &RateConfig<S>,
        projectors: &[ProjectionOperator<S>],
        lambda: f64,
        round: usize,
    ) -> Result<()> {
        let m = agent.data.cols();
        let steps = cfg
            .inner_steps
            .unwrap_or_else(|| m.div_ceil(cfg.batch_size));
        if steps == 0 {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[tag("inner"), agent.id as u64, round as u64],
        ));
        let lam = S::of(lambda);
        // In direct mode the penalty term's curvature grows with λ, so the
        // step is capped to keep the residual update contractive.
        let step_size = if lambda > 0.0 {
            S::of(cfg.learning_rate.min(0.25 / lambda))
        } else {
            S::of(cfg.learning_rate)
        };

        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let mut cursor = 0usize;
        for _ in 0..steps {
            if cursor >= m {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let end = (cursor + cfg.batch_size).min(m);
            // The shuffle decides batch membership; processing order within
            // a batch is canonical so column summation order cannot leak
            // into results.
            let mut batch_idx: Vec<usize> = order[cursor..end].to_vec();
            batch_idx.sort_unstable();
            let batch_idx = &batch_idx[..];
            cursor = end;

            let batch_labels: Vec<usize> = batch_idx
                .iter()
                .map(|&j| agent.partition.labels()[j])
                .collect();
            let batch_part =
                MembershipPartition::from_labels(&batch_labels, projectors.len())?;

            match &mut agent.model {
                AgentModel::Direct(z) => {
                    let zb = z.select_columns(batch_idx);
                    let grad = local_loss_gradient(&zb, &batch_part, projectors, lam, rate_cfg)?;
                    let stepped = direct_feature_step(&zb, &grad, step_size)?;
                    let mut merged = z.matrix().clone();
                    merged.set_columns(batch_idx, stepped.matrix());
                    *z = FeatureMatrix::new(merged).map_err(|e| {
                        Error::NumericalFailure(format!("renormalization drifted: {e}"))
                    })?;
                }
                AgentModel::Encoder { params, optimizer } => {
                    let xb = agent.data.select_columns(batch_idx);
                    let zb = forward(params, &xb)?;
                    let grad = local_loss_gradient(&zb, &batch_part, projectors, lam, rate_cfg)?;
                    let grads = backward(params, &xb, &grad)?;
                    optimizer_step(optimizer, params, &grads);
                }
            }
        }
        Ok(())
    }

    fn agent_record(
        &self,
        agent: &AgentState<S>,
        z: &FeatureMatrix<S>,
        messages: &[BasisMessage<S>],
        lambda: f64,
    ) -> Result<AgentRecord> {
        let loss = local_loss(
            z,
            &agent.partition,
            &self.projectors,
            S::of(lambda),
            &self.rate_cfg,
        )?;
        let trace = check_trace_bound(z, &agent.partition, &self.projectors, &self.rate_cfg)?;
        let local_truth_distance = match &self.truth {
            Some(gt) if gt.ambient_dim() == z.feature_dim() => {
                let mut dists = Vec::with_capacity(self.class_count);
                for k in 0..self.class_count {
                    let msg = messages
                        .iter()
                        .find(|m| m.agent_id == agent.id && m.class_id == k as u32);
                    let d = match msg {
                        Some(m) => {
                            subspace_containment(&m.basis, &gt.class_block(k))?.to_f64_lossy()
                        }
                        None => f64::NAN,
                    };
                    dists.push(d);
                }
                Some(dists)
            }
            _ => None,
        };
        Ok(AgentRecord {
            agent: agent.id,
            rate_expand: loss.rate_expand.to_f64_lossy(),
            rate_compress: loss.rate_compress.to_f64_lossy(),
            projection_penalty: loss.projection_penalty.to_f64_lossy(),
            loss_total: loss.total.to_f64_lossy(),
            residual_total: trace.residual_total.to_f64_lossy(),
            residual_per_class: trace
                .residual_per_class
                .iter()
                .map(|x| x.to_f64_lossy())
                .collect(),
            trace_difference: trace.difference.to_f64_lossy(),
            trace_bound: trace.bound.to_f64_lossy(),
            trace_slack: trace.slack.to_f64_lossy(),
            local_truth_distance,
        })
    }

    fn fused_records(&self) -> Result<Vec<FusedRecord>> {
        let mut out = Vec::with_capacity(self.class_count);
        for k in 0..self.class_count {
            let truth_distance = match (&self.fused[k], &self.truth) {
                (Some(basis), Some(gt)) if gt.ambient_dim() == basis.dim_ambient() => {
                    Some(subspace_containment(basis, &gt.class_block(k))?.to_f64_lossy())
                }
                _ => None,
            };
            out.push(FusedRecord {
                class: k,
                rank_deficient: self.fused_rank_deficient[k],
                truth_distance,
            });
        }
        Ok(out)
    }
}

/// Executes one round: fuse the previous broadcast, train every agent,
/// extract and broadcast new bases, and record metrics.
pub fn run_round<S: Scalar>(state: &mut RunState<S>) -> Result<RoundRecord> {
    let started = std::time::Instant::now();
    state.fuse_round()?;
    let lambda = state.config.lambda_at(state.round)?;

    let cfg = state.config.clone();
    let rate_cfg = state.rate_cfg;
    let projectors = state.projectors.clone();
    let round = state.round;

    let worker = |agent: &mut AgentState<S>| -> Result<()> {
        RunState::train_agent(agent, &cfg, &rate_cfg, &projectors, lambda, round)
    };

    let threads = if cfg.threads == 0 {
        state.agents.len()
    } else {
        cfg.threads
    };
    if threads <= 1 || state.agents.len() <= 1 {
        for agent in &mut state.agents {
            worker(agent)?;
        }
    } else {
        // Per-agent tasks share nothing mutable; collection order is the
        // vector order, so scheduling cannot change results.
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.min(state.agents.len()))
            .build()
            .map_err(|e| Error::ConfigError(format!("thread pool: {e}")))?;
        let results: Vec<Result<()>> = pool.install(|| {
            use rayon::prelude::*;
            state.agents.par_iter_mut().map(worker).collect()
        });
        for r in results {
            r?;
        }
    }

    // Extract and broadcast with the post-update features.
    let next_round = (state.round + 1) as u32;
    let messages = state.broadcast(next_round)?;

    let mut agent_records = Vec::with_capacity(state.agents.len());
    let mut total_loss = 0.0;
    for agent in &state.agents {
        let z = agent.full_features()?;
        let rec = state.agent_record(agent, &z, &messages, lambda)?;
        total_loss += rec.loss_total;
        agent_records.push(rec);
    }

    let record = RoundRecord {
        round: state.round,
        lambda,
        total_loss,
        agents: agent_records,
        fused: state.fused_records()?,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    state.inbox = messages;
    state.round += 1;
    Ok(record)
}

/// Runs to completion (or early stop) streaming records into `sink`.
pub fn run<S: Scalar>(
    cfg: &RunConfig,
    dataset: &MultiViewDataset<S>,
    truth: Option<&GroundTruth<S>>,
    mut sink: impl FnMut(&RoundRecord) -> Result<()>,
) -> Result<(RunState<S>, Vec<RoundRecord>)> {
    let mut state = initialize_run(cfg, dataset, truth)?;
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut history: Vec<f64> = Vec::new();
    for _ in 0..cfg.rounds {
        let record = run_round(&mut state)?;
        history.push(record.total_loss);
        sink(&record)?;
        records.push(record);
        let w = cfg.early_stop_window;
        if w > 0 && history.len() > w {
            let prev = history[history.len() - 1 - w];
            let cur = *history.last().unwrap();
            if (cur - prev).abs() < cfg.early_stop_tol * prev.abs().max(1.0) {
                break;
            }
        }
    }
    Ok((state, records))
}

/// Serialized snapshot of a run: fused bases plus per-agent models.
pub struct Checkpoint<S: Scalar> {
    pub mode: Mode,
    pub round: usize,
    pub feature_dim: usize,
    pub fused: Vec<Option<OrthonormalBasis<S>>>,
    pub encoders: Vec<EncoderParams<S>>,
    pub direct_features: Vec<DenseMatrix<S>>,
}

/// Writes the current run state as a checkpoint file.
pub fn write_checkpoint<S: Scalar>(state: &RunState<S>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u16_le(&mut w, CHECKPOINT_VERSION)?;
    w.write_all(&[match state.config.mode {
        Mode::Encoder => 0u8,
        Mode::Direct => 1u8,
    }])?;
    write_u32_le(&mut w, state.round as u32)?;
    write_u32_le(&mut w, state.agents.len() as u32)?;
    write_u32_le(&mut w, state.class_count as u32)?;
    write_u32_le(&mut w, state.config.feature_dim as u32)?;
    for k in 0..state.class_count {
        match &state.fused[k] {
            None => w.write_all(&[0])?,
            Some(basis) => {
                w.write_all(&[1])?;
                let m = basis.matrix();
                write_u32_le(&mut w, m.cols() as u32)?;
                for x in m.data() {
                    w.write_all(&x.to_f64_lossy().to_le_bytes())?;
                }
            }
        }
    }
    for agent in &state.agents {
        match &agent.model {
            AgentModel::Encoder { params, .. } => write_params(&mut w, params)?,
            AgentModel::Direct(z) => {
                let m = z.matrix();
                write_u32_le(&mut w, m.cols() as u32)?;
                for x in m.data() {
                    w.write_all(&x.to_f64_lossy().to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::CorruptMessage(format!(
            "bad checkpoint magic {magic:02x?}"
        )));
    }
    let version = read_u16_le(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CorruptMessage(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut mode_byte = [0u8; 1];
    r.read_exact(&mut mode_byte)?;
    let mode = match mode_byte[0] {
        0 => Mode::Encoder,
        1 => Mode::Direct,
        other => {
            return Err(Error::CorruptMessage(format!("bad mode byte {other}")));
        }
    };
    let round = read_u32_le(&mut r)? as usize;
    let n_agents = read_u32_le(&mut r)? as usize;
    let class_count = read_u32_le(&mut r)? as usize;
    let feature_dim = read_u32_le(&mut r)? as usize;
    let read_f64 = |r: &mut BufReader<File>| -> Result<f64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    };
    let mut fused = Vec::with_capacity(class_count);
    for _ in 0..class_count {
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        if flag[0] == 0 {
            fused.push(None);
            continue;
        }
        let cols = read_u32_le(&mut r)? as usize;
        let mut data = Vec::with_capacity(feature_dim * cols);
        for _ in 0..feature_dim * cols {
            let x = read_f64(&mut r)?;
            if !x.is_finite() {
                return Err(Error::CorruptMessage("non-finite basis entry".into()));
            }
            data.push(S::of(x));
        }
        fused.push(Some(OrthonormalBasis::new(DenseMatrix::new(
            feature_dim,
            cols,
            data,
        )?)?));
    }
    let mut encoders = Vec::new();
    let mut direct_features = Vec::new();
    for _ in 0..n_agents {
        match mode {
            Mode::Encoder => encoders.push(read_params(&mut r)?),
            Mode::Direct => {
                let cols = read_u32_le(&mut r)? as usize;
                let mut data = Vec::with_capacity(feature_dim * cols);
                for _ in 0..feature_dim * cols {
                    let x = read_f64(&mut r)?;
                    if !x.is_finite() {
                        return Err(Error::CorruptMessage("non-finite feature entry".into()));
                    }
                    data.push(S::of(x));
                }
                direct_features.push(DenseMatrix::new(feature_dim, cols, data)?);
            }
        }
    }
    Ok(Checkpoint {
        mode,
        round,
        feature_dim,
        fused,
        encoders,
        direct_features,
    })
}

/// Serializes the current inbox (one round's broadcast) into a byte
/// stream of concatenated wire messages.
pub fn serialize_inbox<S: Scalar>(state: &RunState<S>) -> Vec<u8> {
    let mut out = Vec::new();
    for msg in &state.inbox {
        out.extend(serialize_basis(msg));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, generate_ground_truth, DatasetParams};

    fn small_setup() -> (RunConfig, MultiViewDataset<f64>, GroundTruth<f64>) {
        let gt = generate_ground_truth(8, &[2, 2], &[4, 4, 4], 0.2, 3).unwrap();
        let ds = generate_dataset(
            &gt,
            &DatasetParams {
                objects_per_class: 12,
                holdout_per_class: 4,
                view_dim: 8,
                identity_views: true,
                noise_sigma: 0.05,
            },
            11,
        )
        .unwrap();
        let cfg = RunConfig {
            feature_dim: 8,
            local_rank: 2,
            fused_rank: 3,
            rounds: 4,
            batch_size: 16,
            learning_rate: 0.05,
            mode: Mode::Direct,
            seed: 5,
            ..Default::default()
        };
        (cfg, ds, gt)
    }

    #[test]
    fn seeded_initialization_is_identical() {
        let (cfg, ds, gt) = small_setup();
        let a = initialize_run(&cfg, &ds, Some(&gt)).unwrap();
        let b = initialize_run(&cfg, &ds, Some(&gt)).unwrap();
        for (x, y) in a.inbox.iter().zip(&b.inbox) {
            assert_eq!(x.basis.matrix().data(), y.basis.matrix().data());
        }
        // Projectors before any fusion are the identity: zero penalty.
        assert!(a.projectors().iter().all(|p| p.is_identity()));
    }

    #[test]
    fn default_lambda_schedule_switches_at_two_thirds() {
        let cfg = RunConfig {
            rounds: 45,
            ..Default::default()
        };
        assert_eq!(cfg.lambda_at(0).unwrap(), 1.0);
        assert_eq!(cfg.lambda_at(29).unwrap(), 1.0);
        assert_eq!(cfg.lambda_at(30).unwrap(), 100.0);
        assert_eq!(cfg.lambda_at(44).unwrap(), 100.0);
    }

    #[test]
    fn bad_schedules_rejected() {
        let cfg = RunConfig {
            lambda_schedule: vec![
                LambdaStage {
                    round: 0,
                    value: 1.0,
                },
                LambdaStage {
                    round: 0,
                    value: 2.0,
                },
            ],
            ..Default::default()
        };
        assert!(cfg.schedule().is_err());
        let cfg = RunConfig {
            lambda_schedule: vec![LambdaStage {
                round: 3,
                value: 1.0,
            }],
            ..Default::default()
        };
        assert!(cfg.schedule().is_err());
    }

    #[test]
    fn agent_count_mismatch_is_a_config_error() {
        let (mut cfg, ds, _) = small_setup();
        cfg.agents = 5; // dataset has 3
        assert!(matches!(
            initialize_run::<f64>(&cfg, &ds, None),
            Err(Error::ConfigError(_))
        ));
        cfg.agents = 3;
        cfg.classes = 7; // dataset has 2
        assert!(matches!(
            initialize_run::<f64>(&cfg, &ds, None),
            Err(Error::ConfigError(_))
        ));
    }

    #[test]
    fn zero_rounds_is_initialization_only() {
        let (mut cfg, ds, _) = small_setup();
        cfg.rounds = 0;
        let (state, records) = run(&cfg, &ds, None, |_| Ok(())).unwrap();
        assert!(records.is_empty());
        assert_eq!(state.round, 0);
    }

    #[test]
    fn rounds_are_deterministic_and_penalty_kicks_in() {
        let (cfg, ds, gt) = small_setup();
        let (_, recs_a) = run(&cfg, &ds, Some(&gt), |_| Ok(())).unwrap();
        let (_, recs_b) = run(&cfg, &ds, Some(&gt), |_| Ok(())).unwrap();
        assert_eq!(recs_a.len(), recs_b.len());
        for (a, b) in recs_a.iter().zip(&recs_b) {
            assert_eq!(
                serde_json::to_string(a).unwrap(),
                serde_json::to_string(b).unwrap()
            );
        }
        // Fusion replaced the identity projectors after round one.
        assert!(recs_a[0].fused.iter().all(|f| f.truth_distance.is_some()));
    }

    #[test]
    fn thread_count_does_not_change_records() {
        let (mut cfg, ds, gt) = small_setup();
        cfg.threads = 1;
        let (_, recs_a) = run(&cfg, &ds, Some(&gt), |_| Ok(())).unwrap();
        cfg.threads = 3;
        let (_, recs_b) = run(&cfg, &ds, Some(&gt), |_| Ok(())).unwrap();
        for (a, b) in recs_a.iter().zip(&recs_b) {
            assert_eq!(
                serde_json::to_string(a).unwrap(),
                serde_json::to_string(b).unwrap()
            );
        }
    }

    #[test]
    fn trace_bound_holds_every_round() {
        let (cfg, ds, gt) = small_setup();
        let (_, recs) = run(&cfg, &ds, Some(&gt), |_| Ok(())).unwrap();
        for rec in &recs {
            assert!(
                rec.min_relative_trace_slack() >= -1e-8,
                "round {} slack {}",
                rec.round,
                rec.min_relative_trace_slack()
            );
        }
    }

    #[test]
    fn checkpoint_round_trips() {
        let (cfg, ds, gt) = small_setup();
        let (state, _) = run(&cfg, &ds, Some(&gt), |_| Ok(())).unwrap();
        let dir = std::env::temp_dir().join("cdl_mvp_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("state.mcrk");
        write_checkpoint(&state, &path).unwrap();
        let ck: Checkpoint<f64> = read_checkpoint(&path).unwrap();
        assert_eq!(ck.mode, Mode::Direct);
        assert_eq!(ck.round, state.round);
        assert_eq!(ck.direct_features.len(), state.agent_count());
        for (k, fused) in ck.fused.iter().enumerate() {
            match (fused, state.fused_basis(k)) {
                (Some(a), Some(b)) => assert_eq!(a.matrix().data(), b.matrix().data()),
                (None, None) => {}
                _ => panic!("fused basis presence mismatch"),
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn agents_with_identical_data_produce_identical_records() {
        // Noiseless identity views make every agent's dataset identical;
        // with full-batch steps the shuffle order is irrelevant, so the
        // per-agent records coincide exactly.
        let gt = generate_ground_truth(8, &[2, 2], &[4, 4], 0.2, 3).unwrap();
        let ds = generate_dataset(
            &gt,
            &DatasetParams {
                objects_per_class: 10,
                holdout_per_class: 0,
                view_dim: 8,
                identity_views: true,
                noise_sigma: 0.0,
            },
            11,
        )
        .unwrap();
        let cfg = RunConfig {
            feature_dim: 8,
            local_rank: 2,
            fused_rank: 2,
            rounds: 3,
            batch_size: 64, // larger than the dataset: one full batch
            seed: 5,
            ..Default::default()
        };
        let (_, recs) = run(&cfg, &ds, Some(&gt), |_| Ok(())).unwrap();
        for rec in &recs {
            let first = serde_json::to_value(&rec.agents[0]).unwrap();
            for a in &rec.agents[1..] {
                let mut v = serde_json::to_value(a).unwrap();
                v["agent"] = first["agent"].clone();
                assert_eq!(v, first, "round {}", rec.round);
            }
        }
    }

    #[test]
    fn zero_inner_steps_leaves_features_but_refreshes_fusion() {
        let (mut cfg, ds, _) = small_setup();
        cfg.inner_steps = Some(0);
        cfg.rounds = 1;
        let mut state = initialize_run::<f64>(&cfg, &ds, None).unwrap();
        let before: Vec<Vec<f64>> = state
            .all_features()
            .unwrap()
            .iter()
            .map(|z| z.matrix().data().to_vec())
            .collect();
        assert!(state.projectors().iter().all(|p| p.is_identity()));
        run_round(&mut state).unwrap();
        let after: Vec<Vec<f64>> = state
            .all_features()
            .unwrap()
            .iter()
            .map(|z| z.matrix().data().to_vec())
            .collect();
        assert_eq!(before, after);
        // Fusion still happened: projectors are no longer the identity.
        assert!(state.projectors().iter().all(|p| !p.is_identity()));
    }

    #[test]
    fn lambda_zero_matches_independent_training() {
        // With λ=0 the projection term is inert: training ignores the
        // fused subspaces entirely.
        let (mut cfg, ds, _) = small_setup();
        cfg.lambda_schedule = vec![LambdaStage {
            round: 0,
            value: 0.0,
        }];
        cfg.rounds = 2;
        let (_, recs) = run(&cfg, &ds, None, |_| Ok(())).unwrap();
        for rec in &recs {
            assert_eq!(rec.lambda, 0.0);
            for a in &rec.agents {
                assert!((a.loss_total - (a.rate_compress - a.rate_expand)).abs() < 1e-9);
            }
        }
    }
}
