//! Command-line front end: dataset generation, training, certification
//! suites, metric reports, and the fusion cost estimate.
//!
//! Exit codes: 0 on success, 2 when a verification bound is violated,
//! 1 on any other error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use cdl_mvp::encoder::forward;
use cdl_mvp::error::{Error, Result};
use cdl_mvp::fusion::build_projectors;
use cdl_mvp::linalg::subspace_containment;
use cdl_mvp::metrics::{
    cosine_similarity_matrix, export_heatmap_ppm, export_similarity_tsv, fusion_cost_estimate,
    nearest_subspace_classify, sis_dis_fisher,
};
use cdl_mvp::orchestrator::{
    initialize_run, run_round, serialize_inbox, write_checkpoint, Mode, RoundRecord, RunConfig,
    RunState,
};
use cdl_mvp::synth::{
    generate_dataset, generate_ground_truth, read_dataset, read_delimited_dataset,
    read_ground_truth, write_dataset, write_ground_truth, DatasetParams, GroundTruth,
    MultiViewDataset,
};
use cdl_mvp::theory::{
    fusion_consistency_experiment, monotonicity_suite, trace_bound_suite, ConsistencyConfig,
};
use cdl_mvp::util::{derive_seed, tag};
use cdl_mvp::{Features, Projector};

#[derive(Parser)]
#[command(name = "cdl-mvp", version, about = "Compositional distributed learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Training mode override.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Worker threads (must not change results).
    #[arg(long)]
    threads: Option<usize>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    match s {
        "encoder" => Ok(Mode::Encoder),
        "direct" => Ok(Mode::Direct),
        other => Err(format!("unknown mode {other:?}, expected encoder|direct")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset and its ground truth.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the distributed model over fusion rounds.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Binary dataset file (generated in-process when omitted).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Ground-truth file matching --data.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Delimited text files, one per agent (alternative to --data).
        #[arg(long, num_args = 1..)]
        text_data: Vec<PathBuf>,
    },
    /// Run the certification suites (trace bound, rate monotonicity,
    /// fusion consistency).
    Verify {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Metrics and heatmaps from a checkpoint.
    Report {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Predicted per-round fusion cost from the configuration.
    Cost {
        #[command(flatten)]
        common: CommonArgs,
        /// Measure one feature pass on this dataset as well.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

// ── configuration file ──────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DatasetConfig {
    latent_dim: usize,
    class_dims: Vec<usize>,
    agents: usize,
    /// Coverage ranks per agent; empty means full global rank for each.
    agent_ranks: Vec<usize>,
    objects_per_class: usize,
    holdout_per_class: usize,
    /// 0 means "same as latent_dim".
    view_dim: usize,
    identity_views: bool,
    noise_sigma: f64,
    beta_min: f64,
    /// 0 means "derived from the run seed".
    seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            class_dims: vec![3, 3, 3, 3],
            agents: 3,
            agent_ranks: Vec::new(),
            objects_per_class: 40,
            holdout_per_class: 15,
            view_dim: 0,
            identity_views: true,
            noise_sigma: 0.1,
            beta_min: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConsistencyParams {
    agents: usize,
    ambient_dim: usize,
    global_rank: usize,
    agent_rank: usize,
    trials: usize,
    noise_grid: Vec<f64>,
    beta_min: f64,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        Self {
            agents: 4,
            ambient_dim: 32,
            global_rank: 8,
            agent_rank: 4,
            trials: 50,
            noise_grid: vec![1e-3, 3e-3, 1e-2, 3e-2, 1e-1],
            beta_min: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct VerifyConfig {
    trace_instances: usize,
    mono_instances: usize,
    /// 0 means "derived from the run seed".
    seed: u64,
    consistency: ConsistencyParams,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            trace_instances: 200,
            mono_instances: 200,
            seed: 0,
            consistency: ConsistencyParams::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    dataset: DatasetConfig,
    run: RunConfig,
    verify: VerifyConfig,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::ConfigError(format!("{}: {e}", p.display())))
        }
    }
}

fn apply_overrides(cfg: &mut FileConfig, common: &CommonArgs) {
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    if let Some(mode) = common.mode {
        cfg.run.mode = mode;
    }
    if let Some(threads) = common.threads {
        cfg.run.threads = threads;
    }
}

fn dataset_seed(cfg: &FileConfig) -> u64 {
    if cfg.dataset.seed != 0 {
        cfg.dataset.seed
    } else {
        derive_seed(cfg.run.seed, &[tag("dataset")])
    }
}

fn build_truth(cfg: &FileConfig) -> Result<GroundTruth<f64>> {
    let ds = &cfg.dataset;
    let global_rank: usize = ds.class_dims.iter().sum();
    let ranks = if ds.agent_ranks.is_empty() {
        vec![global_rank; ds.agents]
    } else {
        if ds.agent_ranks.len() != ds.agents {
            return Err(Error::ConfigError(format!(
                "{} agent_ranks for {} agents",
                ds.agent_ranks.len(),
                ds.agents
            )));
        }
        ds.agent_ranks.clone()
    };
    generate_ground_truth(
        ds.latent_dim,
        &ds.class_dims,
        &ranks,
        ds.beta_min,
        derive_seed(dataset_seed(cfg), &[tag("truth")]),
    )
}

fn build_dataset(cfg: &FileConfig, gt: &GroundTruth<f64>) -> Result<MultiViewDataset<f64>> {
    let ds = &cfg.dataset;
    let view_dim = if ds.view_dim == 0 {
        ds.latent_dim
    } else {
        ds.view_dim
    };
    generate_dataset(
        gt,
        &DatasetParams {
            objects_per_class: ds.objects_per_class,
            holdout_per_class: ds.holdout_per_class,
            view_dim,
            identity_views: ds.identity_views,
            noise_sigma: ds.noise_sigma,
        },
        dataset_seed(cfg),
    )
}

// ── evaluation shared by train and report ──────────────────────────────

#[derive(Debug, Serialize)]
struct EvalSummary {
    accuracy: f64,
    sis: Option<f64>,
    dis: f64,
    /// Serialized as null when the within-class scatter vanishes.
    fisher_ratio: f64,
    cross_class_mean_abs_cos: f64,
    within_class_mean_abs_cos: f64,
    fused_truth_distance: Option<Vec<f64>>,
    mean_fused_truth_distance: Option<f64>,
}

fn evaluate_holdout(
    features: &[Features],
    labels: &[usize],
    object_ids: &[u32],
    projectors: &[Projector],
    fused: &[Option<cdl_mvp::Basis>],
    truth: Option<&GroundTruth<f64>>,
) -> Result<EvalSummary> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for z in features {
        let pred = nearest_subspace_classify(z, projectors)?;
        hits += pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        total += pred.len();
    }
    let acc = hits as f64 / total.max(1) as f64;
    let sdf = sis_dis_fisher(features, labels, Some(object_ids))?;
    let sim = cosine_similarity_matrix(features, labels, object_ids)?;

    let fused_truth_distance = match truth {
        Some(gt) if !fused.is_empty() && fused.iter().all(|f| f.is_some()) => {
            let mut dists = Vec::with_capacity(fused.len());
            for (k, basis) in fused.iter().enumerate() {
                let basis = basis.as_ref().unwrap();
                if basis.dim_ambient() != gt.ambient_dim() {
                    dists.clear();
                    break;
                }
                dists.push(subspace_containment(basis, &gt.class_block(k))?);
            }
            if dists.is_empty() {
                None
            } else {
                Some(dists)
            }
        }
        _ => None,
    };
    let mean_fused = fused_truth_distance
        .as_ref()
        .map(|d| d.iter().sum::<f64>() / d.len() as f64);

    Ok(EvalSummary {
        accuracy: acc,
        sis: sdf.sis,
        dis: sdf.dis,
        fisher_ratio: sdf.fisher_ratio,
        cross_class_mean_abs_cos: sim.cross_class_mean_abs(),
        within_class_mean_abs_cos: sim.within_class_mean_abs(),
        fused_truth_distance,
        mean_fused_truth_distance: mean_fused,
    })
}

fn holdout_features(
    state: &RunState<f64>,
    dataset: &MultiViewDataset<f64>,
) -> Result<Option<(Vec<Features>, Vec<usize>, Vec<u32>)>> {
    let idx = dataset.holdout_indices();
    if idx.is_empty() {
        return Ok(None);
    }
    let labels: Vec<usize> = idx.iter().map(|&j| dataset.labels[j]).collect();
    let ids: Vec<u32> = idx.iter().map(|&j| dataset.object_ids[j]).collect();
    let mut feats = Vec::with_capacity(dataset.agent_count());
    for (i, view) in dataset.views.iter().enumerate() {
        let x = view.samples.select_columns(&idx);
        feats.push(state.encode(i, &x)?);
    }
    Ok(Some((feats, labels, ids)))
}

// ── subcommands ─────────────────────────────────────────────────────────

fn cmd_generate(common: &CommonArgs) -> Result<u8> {
    let mut cfg = load_config(common.config.as_deref())?;
    apply_overrides(&mut cfg, common);
    fs::create_dir_all(&common.out)?;
    let gt = build_truth(&cfg)?;
    let ds = build_dataset(&cfg, &gt)?;
    let data_path = common.out.join("dataset.mvds");
    let truth_path = common.out.join("truth.mvgt");
    write_dataset(&ds, &data_path)?;
    write_ground_truth(&gt, &truth_path)?;
    println!(
        "dataset: {} agents, {} classes, {} objects ({} train + {} holdout per class), beta={:.4}",
        ds.agent_count(),
        ds.class_count,
        ds.object_count(),
        ds.train_per_class,
        ds.holdout_per_class,
        gt.beta
    );
    println!("wrote {}", data_path.display());
    println!("wrote {}", truth_path.display());
    Ok(0)
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    rounds_completed: usize,
    final_total_loss: f64,
    min_relative_trace_slack: f64,
    trace_bound_ok: bool,
    mean_local_truth_distance: Option<f64>,
    eval: Option<EvalSummary>,
}

fn cmd_train(
    common: &CommonArgs,
    data: Option<&Path>,
    truth: Option<&Path>,
    text_data: &[PathBuf],
) -> Result<u8> {
    let mut cfg = load_config(common.config.as_deref())?;
    apply_overrides(&mut cfg, common);
    fs::create_dir_all(&common.out)?;

    let (dataset, gt) = if !text_data.is_empty() {
        let paths: Vec<&Path> = text_data.iter().map(|p| p.as_path()).collect();
        let k = cfg.dataset.class_dims.len();
        (read_delimited_dataset::<f64>(&paths, k)?, None)
    } else if let Some(path) = data {
        let ds = read_dataset::<f64>(path)?;
        let gt = truth.map(read_ground_truth::<f64>).transpose()?;
        (ds, gt)
    } else {
        let gt = build_truth(&cfg)?;
        let ds = build_dataset(&cfg, &gt)?;
        (ds, Some(gt))
    };

    let ckpt_dir = common.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let log_path = common.out.join("rounds.jsonl");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path)?);
    let msg_dir = common.out.join("messages");
    if cfg.run.dump_messages {
        fs::create_dir_all(&msg_dir)?;
    }

    let started = std::time::Instant::now();
    let mut state = initialize_run(&cfg.run, &dataset, gt.as_ref())?;
    if cfg.run.dump_messages {
        fs::write(msg_dir.join("round_0000.mcrb"), serialize_inbox(&state))?;
    }
    let mut records: Vec<RoundRecord> = Vec::new();
    let mut history: Vec<f64> = Vec::new();
    for r in 0..cfg.run.rounds {
        let record = run_round(&mut state)?;
        writeln!(log, "{}", serde_json::to_string(&record)?)?;
        eprintln!(
            "round {:4}  lambda {:8.1}  loss {:+.6e}  wall {:.1} ms",
            record.round, record.lambda, record.total_loss, record.wall_ms
        );
        history.push(record.total_loss);
        records.push(record);
        if cfg.run.dump_messages {
            fs::write(
                msg_dir.join(format!("round_{:04}.mcrb", r + 1)),
                serialize_inbox(&state),
            )?;
        }
        if cfg.run.checkpoint_every > 0 && (r + 1) % cfg.run.checkpoint_every == 0 {
            write_checkpoint(&state, &ckpt_dir.join(format!("round_{:04}.mcrk", r + 1)))?;
        }
        let w = cfg.run.early_stop_window;
        if w > 0 && history.len() > w {
            let prev = history[history.len() - 1 - w];
            let cur = *history.last().unwrap();
            if (cur - prev).abs() < cfg.run.early_stop_tol * prev.abs().max(1.0) {
                eprintln!("early stop at round {r}: relative loss change below tolerance");
                break;
            }
        }
    }
    log.flush()?;
    write_checkpoint(&state, &ckpt_dir.join("final.mcrk"))?;

    let min_slack = records
        .iter()
        .map(|r| r.min_relative_trace_slack())
        .fold(f64::INFINITY, f64::min);
    let trace_ok = records.is_empty() || min_slack >= -1e-8;

    let mean_local = records.last().and_then(|rec| {
        let mut acc = 0.0;
        let mut n = 0usize;
        for a in &rec.agents {
            if let Some(d) = &a.local_truth_distance {
                for x in d.iter().filter(|x| x.is_finite()) {
                    acc += x;
                    n += 1;
                }
            }
        }
        if n > 0 {
            Some(acc / n as f64)
        } else {
            None
        }
    });

    let fused: Vec<Option<cdl_mvp::Basis>> = (0..state.class_count())
        .map(|k| state.fused_basis(k).cloned())
        .collect();
    let eval = match holdout_features(&state, &dataset)? {
        None => None,
        Some((feats, labels, ids)) => Some(evaluate_holdout(
            &feats,
            &labels,
            &ids,
            state.projectors(),
            &fused,
            gt.as_ref(),
        )?),
    };

    let summary = TrainSummary {
        rounds_completed: records.len(),
        final_total_loss: *history.last().unwrap_or(&f64::NAN),
        min_relative_trace_slack: min_slack,
        trace_bound_ok: trace_ok,
        mean_local_truth_distance: mean_local,
        eval,
    };
    fs::write(
        common.out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    eprintln!(
        "trained {} rounds in {:.2} s; summary at {}",
        records.len(),
        started.elapsed().as_secs_f64(),
        common.out.join("summary.json").display()
    );
    if !trace_ok {
        println!("trace bound check: FAIL (min relative slack {min_slack:e})");
        return Ok(2);
    }
    println!("trace bound check: PASS (min relative slack {min_slack:e})");
    Ok(0)
}

fn cmd_verify(common: &CommonArgs) -> Result<u8> {
    let mut cfg = load_config(common.config.as_deref())?;
    apply_overrides(&mut cfg, common);
    fs::create_dir_all(&common.out)?;
    let seed = if cfg.verify.seed != 0 {
        cfg.verify.seed
    } else {
        cfg.run.seed
    };
    let mut failures = 0usize;
    let mut report = String::new();

    let started = std::time::Instant::now();
    let trace = trace_bound_suite::<f64>(cfg.verify.trace_instances, seed)?;
    let trace_ok = trace.violations == 0;
    let line = format!(
        "trace bound: {} ({} instances, min relative slack {:e}, {:.2} s)",
        if trace_ok { "PASS" } else { "FAIL" },
        trace.instances,
        trace.min_relative_slack,
        started.elapsed().as_secs_f64()
    );
    println!("{line}");
    report.push_str(&line);
    report.push('\n');
    failures += usize::from(!trace_ok);

    let started = std::time::Instant::now();
    let mono = monotonicity_suite::<f64>(cfg.verify.mono_instances, seed)?;
    let mono_ok = mono.violations == 0;
    let line = format!(
        "rate monotonicity: {} ({} instances, {} checks, max excess {:e}, {:.2} s)",
        if mono_ok { "PASS" } else { "FAIL" },
        mono.instances,
        mono.checks,
        mono.max_violation,
        started.elapsed().as_secs_f64()
    );
    println!("{line}");
    report.push_str(&line);
    report.push('\n');
    failures += usize::from(!mono_ok);

    let started = std::time::Instant::now();
    let cc = &cfg.verify.consistency;
    let consistency = fusion_consistency_experiment::<f64>(&ConsistencyConfig {
        agents: cc.agents,
        ambient_dim: cc.ambient_dim,
        global_rank: cc.global_rank,
        agent_rank: cc.agent_rank,
        noise_grid: cc.noise_grid.clone(),
        trials: cc.trials,
        beta_min: cc.beta_min,
        seed,
    })?;
    let slope_ok = consistency.log_log_slope >= 0.8 && consistency.log_log_slope <= 1.2;
    let zero_ok = consistency.zero_noise_max_distance <= 1e-10;
    let cons_ok = consistency.all_within_bound && slope_ok && zero_ok;
    let line = format!(
        "fusion consistency: {} (all within bound: {}, slope {:.3}, zero-noise max {:e}, \
         min beta {:.3}, max constant {:.2}, {:.2} s)",
        if cons_ok { "PASS" } else { "FAIL" },
        consistency.all_within_bound,
        consistency.log_log_slope,
        consistency.zero_noise_max_distance,
        consistency.min_beta,
        consistency.max_constant,
        started.elapsed().as_secs_f64()
    );
    println!("{line}");
    report.push_str(&line);
    report.push('\n');
    for level in &consistency.levels {
        let line = format!(
            "  delta {:9.1e}: median {:9.3e}  max {:9.3e}  worst ratio to bound {:.3}",
            level.delta, level.median_distance, level.max_distance, level.worst_bound_ratio
        );
        println!("{line}");
        report.push_str(&line);
        report.push('\n');
    }
    failures += usize::from(!cons_ok);

    fs::write(common.out.join("verify_report.txt"), report)?;
    Ok(if failures > 0 { 2 } else { 0 })
}

fn cmd_report(
    common: &CommonArgs,
    checkpoint: &Path,
    data: &Path,
    truth: Option<&Path>,
) -> Result<u8> {
    fs::create_dir_all(&common.out)?;
    let ck = cdl_mvp::orchestrator::read_checkpoint::<f64>(checkpoint)?;
    let dataset = read_dataset::<f64>(data)?;
    let gt = truth.map(read_ground_truth::<f64>).transpose()?;

    if ck.fused.iter().any(|f| f.is_none()) {
        return Err(Error::MetricUnavailable(
            "checkpoint has unfused classes; train at least one round".into(),
        ));
    }
    let bases: Vec<cdl_mvp::Basis> = ck.fused.iter().map(|f| f.clone().unwrap()).collect();
    let projectors = build_projectors(&bases);

    let idx = dataset.holdout_indices();
    let idx = if idx.is_empty() {
        dataset.train_indices()
    } else {
        idx
    };
    let labels: Vec<usize> = idx.iter().map(|&j| dataset.labels[j]).collect();
    let ids: Vec<u32> = idx.iter().map(|&j| dataset.object_ids[j]).collect();
    let mut feats = Vec::with_capacity(dataset.agent_count());
    for (i, view) in dataset.views.iter().enumerate() {
        let x = view.samples.select_columns(&idx);
        let z = match ck.mode {
            Mode::Encoder => forward(&ck.encoders[i], &x)?,
            Mode::Direct => Features::from_normalized(&x),
        };
        feats.push(z);
    }

    let fused: Vec<Option<cdl_mvp::Basis>> = bases.iter().cloned().map(Some).collect();
    let eval = evaluate_holdout(&feats, &labels, &ids, &projectors, &fused, gt.as_ref())?;
    fs::write(
        common.out.join("metrics.json"),
        serde_json::to_string_pretty(&eval)?,
    )?;
    let sim = cosine_similarity_matrix(&feats, &labels, &ids)?;
    export_similarity_tsv(&sim, &common.out.join("similarity.tsv"))?;
    export_heatmap_ppm(&sim, &common.out.join("similarity.ppm"))?;
    println!(
        "accuracy {:.4}  sis {}  dis {:.4}  fisher {:.4}",
        eval.accuracy,
        eval.sis.map_or("n/a".to_string(), |v| format!("{v:.4}")),
        eval.dis,
        eval.fisher_ratio
    );
    println!("wrote {}", common.out.join("metrics.json").display());
    Ok(0)
}

fn cmd_cost(common: &CommonArgs, data: Option<&Path>) -> Result<u8> {
    let mut cfg = load_config(common.config.as_deref())?;
    apply_overrides(&mut cfg, common);
    let k = cfg.dataset.class_dims.len() as u64;
    let agents = cfg.dataset.agents as u64;
    let d = cfg.run.feature_dim as u64;
    let total_samples = match data {
        Some(path) => {
            let ds = read_dataset::<f64>(path)?;
            (ds.agent_count() * ds.train_indices().len()) as u64
        }
        None => agents * k * cfg.dataset.objects_per_class as u64,
    };
    let local = vec![cfg.run.local_rank as u64; k as usize];
    let fused = vec![cfg.run.fused_rank as u64; k as usize];
    let flops = fusion_cost_estimate(agents, d, total_samples, &local, &fused)?;
    println!("predicted_flops_per_round: {flops}");
    println!(
        "  (classes={k}, agents={agents}, d={d}, M={total_samples}, p={}, P={})",
        cfg.run.local_rank, cfg.run.fused_rank
    );

    if let Some(path) = data {
        // One measured feature pass for comparison; wall time is
        // machine-dependent and printed to stderr only.
        let ds = read_dataset::<f64>(path)?;
        let mut run_cfg = cfg.run.clone();
        run_cfg.rounds = 0;
        let state = initialize_run(&run_cfg, &ds, None)?;
        let started = std::time::Instant::now();
        let _ = state.all_features()?;
        eprintln!(
            "measured_feature_pass_ms: {:.3}",
            started.elapsed().as_secs_f64() * 1e3
        );
    }
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<u8> {
    match &cli.command {
        Command::Generate { common } => cmd_generate(common),
        Command::Train {
            common,
            data,
            truth,
            text_data,
        } => cmd_train(common, data.as_deref(), truth.as_deref(), text_data),
        Command::Verify { common } => cmd_verify(common),
        Command::Report {
            common,
            checkpoint,
            data,
            truth,
        } => cmd_report(common, checkpoint, data, truth.as_deref()),
        Command::Cost { common, data } => cmd_cost(common, data.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are not errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
