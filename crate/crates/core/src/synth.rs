//! Synthetic multi-view data with known ground truth: mutually orthogonal
//! class subspaces inside a global discriminative subspace, shared latent
//! objects, and per-agent views of those objects.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{orthonormalize_columns, thin_svd, DenseMatrix, OrthonormalBasis};
use crate::rate::MembershipPartition;
use crate::scalar::Scalar;
use crate::util::{read_f64_le, read_u16_le, read_u32_le, write_f64_le, write_u16_le, write_u32_le};

const DATA_MAGIC: &[u8; 4] = b"MVDS";
const TRUTH_MAGIC: &[u8; 4] = b"MVGT";
const FORMAT_VERSION: u16 = 1;

/// Latent structure behind a generated dataset: a global basis split into
/// orthogonal class blocks, plus per-agent coverage of the global subspace.
#[derive(Debug, Clone)]
pub struct GroundTruth<S> {
    /// Orthonormal basis of the global discriminative subspace (d x R).
    pub global_basis: OrthonormalBasis<S>,
    /// Dimensions of the per-class blocks; they partition the R columns.
    pub class_dims: Vec<usize>,
    /// Per-agent coefficient matrices O_i (R x r_i, column-orthogonal).
    pub coverage: Vec<DenseMatrix<S>>,
    /// Per-agent population bases `U*·O_i`.
    pub agent_bases: Vec<OrthonormalBasis<S>>,
    /// Achieved R-th singular value of the stacked coverage matrix.
    pub beta: S,
}

impl<S: Scalar> GroundTruth<S> {
    pub fn ambient_dim(&self) -> usize {
        self.global_basis.dim_ambient()
    }

    pub fn global_rank(&self) -> usize {
        self.global_basis.dim_subspace()
    }

    pub fn class_count(&self) -> usize {
        self.class_dims.len()
    }

    /// Orthonormal basis of class k's block of the global subspace.
    pub fn class_block(&self, k: usize) -> OrthonormalBasis<S> {
        let offset: usize = self.class_dims[..k].iter().sum();
        let idx: Vec<usize> = (offset..offset + self.class_dims[k]).collect();
        OrthonormalBasis::new(self.global_basis.matrix().select_columns(&idx))
            .expect("block of an orthonormal basis is orthonormal")
    }
}

fn gaussian_matrix<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix<S> {
    DenseMatrix::from_fn(rows, cols, |_, _| {
        S::of(rng.sample::<f64, _>(StandardNormal))
    })
}

fn random_orthonormal<S: Scalar>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
) -> Result<OrthonormalBasis<S>> {
    // Gaussian columns are almost surely independent; retry on the
    // measure-zero degenerate draw.
    for _ in 0..4 {
        let g = gaussian_matrix::<S>(rng, rows, cols);
        if let Ok(b) = orthonormalize_columns(&g) {
            return Ok(b);
        }
    }
    Err(Error::NumericalFailure(
        "repeated rank-deficient random draws".into(),
    ))
}

/// Draws a global basis, splits it into class blocks, and samples
/// per-agent coverage until the stacked coverage matrix has R-th singular
/// value at least `beta_min` (at most 100 attempts).
pub fn generate_ground_truth<S: Scalar>(
    ambient_dim: usize,
    class_dims: &[usize],
    agent_ranks: &[usize],
    beta_min: S,
    seed: u64,
) -> Result<GroundTruth<S>> {
    let global_rank: usize = class_dims.iter().sum();
    if global_rank == 0 || class_dims.contains(&0) {
        return Err(Error::InvalidCount("class dims must be positive".into()));
    }
    if global_rank > ambient_dim {
        return Err(Error::ConfigError(format!(
            "class dims sum to {global_rank} > ambient dim {ambient_dim}"
        )));
    }
    if agent_ranks.is_empty() || agent_ranks.contains(&0) {
        return Err(Error::InvalidCount("agent ranks must be positive".into()));
    }
    if agent_ranks.iter().any(|&r| r > global_rank) {
        return Err(Error::ConfigError(format!(
            "an agent rank exceeds the global rank {global_rank}"
        )));
    }
    let total: usize = agent_ranks.iter().sum();
    if total < global_rank {
        return Err(Error::CoverageInfeasible {
            required: global_rank,
            available: total,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let global_basis = random_orthonormal::<S>(&mut rng, ambient_dim, global_rank)?;

    for attempt in 0..100 {
        let coverage: Vec<DenseMatrix<S>> = agent_ranks
            .iter()
            .map(|&r| Ok(random_orthonormal::<S>(&mut rng, global_rank, r)?.matrix().clone()))
            .collect::<Result<_>>()?;
        let stacked = DenseMatrix::hstack(&coverage.iter().collect::<Vec<_>>())?;
        let sv = thin_svd(&stacked)?.singular_values;
        let beta = sv[global_rank - 1];
        if beta >= beta_min {
            let agent_bases = coverage
                .iter()
                .map(|o| OrthonormalBasis::new(global_basis.matrix().matmul(o)?))
                .collect::<Result<Vec<_>>>()?;
            return Ok(GroundTruth {
                global_basis,
                class_dims: class_dims.to_vec(),
                coverage,
                agent_bases,
                beta,
            });
        }
        let _ = attempt;
    }
    Err(Error::NumericalFailure(format!(
        "coverage below beta_min={} after 100 attempts",
        beta_min.to_f64_lossy()
    )))
}

/// How an agent observes the latent objects.
#[derive(Debug, Clone)]
pub enum ViewMap<S> {
    /// The view is the latent vector itself (requires view_dim = d).
    Identity,
    /// Fixed full-rank linear map (view_dim x d).
    Linear(DenseMatrix<S>),
    /// Imported data with no known map.
    External,
}

/// One agent's samples: `x_t = A_i s_t + noise`, columns aligned with the
/// shared object order.
#[derive(Debug, Clone)]
pub struct AgentView<S> {
    pub map: ViewMap<S>,
    /// view_dim x m sample matrix.
    pub samples: DenseMatrix<S>,
}

/// Multi-view dataset: every agent sees the same objects (alignment by
/// column index / object id), each through its own view map and noise.
#[derive(Debug, Clone)]
pub struct MultiViewDataset<S> {
    /// Per-object class labels, shared across agents.
    pub labels: Vec<usize>,
    /// Per-object ids; position j in every agent's sample matrix is the
    /// same physical object.
    pub object_ids: Vec<u32>,
    /// Latent vectors (d x m); empty for imported datasets.
    pub latent: Option<DenseMatrix<S>>,
    pub views: Vec<AgentView<S>>,
    pub class_count: usize,
    /// First `train_per_class` objects of each class train; the next
    /// `holdout_per_class` are held out for evaluation.
    pub train_per_class: usize,
    pub holdout_per_class: usize,
    pub noise_sigma: f64,
}

impl<S: Scalar> MultiViewDataset<S> {
    pub fn agent_count(&self) -> usize {
        self.views.len()
    }

    pub fn object_count(&self) -> usize {
        self.labels.len()
    }

    fn split_indices(&self, holdout: bool) -> Vec<usize> {
        let per_class = self.train_per_class + self.holdout_per_class;
        let mut idx = Vec::new();
        for (j, _) in self.labels.iter().enumerate() {
            let within = j % per_class.max(1);
            let is_holdout = within >= self.train_per_class;
            if is_holdout == holdout {
                idx.push(j);
            }
        }
        idx
    }

    /// Column indices of training objects.
    pub fn train_indices(&self) -> Vec<usize> {
        if self.holdout_per_class == 0 {
            return (0..self.object_count()).collect();
        }
        self.split_indices(false)
    }

    /// Column indices of held-out objects.
    pub fn holdout_indices(&self) -> Vec<usize> {
        if self.holdout_per_class == 0 {
            return Vec::new();
        }
        self.split_indices(true)
    }

    pub fn membership(&self, indices: &[usize]) -> Result<MembershipPartition> {
        let labels: Vec<usize> = indices.iter().map(|&j| self.labels[j]).collect();
        MembershipPartition::from_labels(&labels, self.class_count)
    }
}

/// Sampling parameters for `generate_dataset`.
#[derive(Debug, Clone)]
pub struct DatasetParams {
    pub objects_per_class: usize,
    pub holdout_per_class: usize,
    pub view_dim: usize,
    pub identity_views: bool,
    pub noise_sigma: f64,
}

/// Draws latent objects inside their class blocks (Gaussian coefficients)
/// and per-agent views `x = A_i s + η` with isotropic Gaussian noise.
/// Pure function of `(gt, params, seed)`.
pub fn generate_dataset<S: Scalar>(
    gt: &GroundTruth<S>,
    params: &DatasetParams,
    seed: u64,
) -> Result<MultiViewDataset<S>> {
    if params.objects_per_class == 0 {
        return Err(Error::InvalidCount("objects_per_class must be > 0".into()));
    }
    if params.noise_sigma < 0.0 {
        return Err(Error::InvalidCount("noise_sigma must be >= 0".into()));
    }
    let d = gt.ambient_dim();
    if params.identity_views && params.view_dim != d {
        return Err(Error::ConfigError(format!(
            "identity views need view_dim = {d}, got {}",
            params.view_dim
        )));
    }
    if params.view_dim == 0 {
        return Err(Error::InvalidCount("view_dim must be > 0".into()));
    }

    let k = gt.class_count();
    let n_agents = gt.coverage.len();
    let per_class = params.objects_per_class + params.holdout_per_class;
    let m = k * per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Latent objects, class-major; within a class the training objects
    // come first, then the held-out ones.
    let mut latent = DenseMatrix::zeros(d, m);
    let mut labels = Vec::with_capacity(m);
    let mut object_ids = Vec::with_capacity(m);
    for class in 0..k {
        let block = gt.class_block(class);
        for j in 0..per_class {
            let col = class * per_class + j;
            let coeffs = gaussian_matrix::<S>(&mut rng, gt.class_dims[class], 1);
            let s = block.matrix().matmul(&coeffs)?;
            latent.col_mut(col).copy_from_slice(s.col(0));
            labels.push(class);
            object_ids.push(col as u32);
        }
    }

    let sigma = S::of(params.noise_sigma);
    let mut views = Vec::with_capacity(n_agents);
    for _ in 0..n_agents {
        let (map, mapped) = if params.identity_views {
            (ViewMap::Identity, latent.clone())
        } else {
            let scale = S::one() / S::from_usize(d).unwrap().sqrt();
            let a = gaussian_matrix::<S>(&mut rng, params.view_dim, d).scale(scale);
            let mapped = a.matmul(&latent)?;
            (ViewMap::Linear(a), mapped)
        };
        let noise = gaussian_matrix::<S>(&mut rng, params.view_dim, m).scale(sigma);
        let samples = mapped.add_scaled(&noise, S::one())?;
        views.push(AgentView { map, samples });
    }

    Ok(MultiViewDataset {
        labels,
        object_ids,
        latent: Some(latent),
        views,
        class_count: k,
        train_per_class: params.objects_per_class,
        holdout_per_class: params.holdout_per_class,
        noise_sigma: params.noise_sigma,
    })
}

/// Builds the per-class membership structure from hard labels.
pub fn membership_from_labels(labels: &[usize], class_count: usize) -> Result<MembershipPartition> {
    MembershipPartition::from_labels(labels, class_count)
}

// ── file formats ────────────────────────────────────────────────────────

fn write_matrix<S: Scalar, W: Write>(w: &mut W, m: &DenseMatrix<S>) -> Result<()> {
    write_u32_le(w, m.rows() as u32)?;
    write_u32_le(w, m.cols() as u32)?;
    for x in m.data() {
        write_f64_le(w, x.to_f64_lossy())?;
    }
    Ok(())
}

fn read_matrix<S: Scalar, R: Read>(r: &mut R) -> Result<DenseMatrix<S>> {
    let rows = read_u32_le(r)? as usize;
    let cols = read_u32_le(r)? as usize;
    if rows.saturating_mul(cols) > (1 << 28) {
        return Err(Error::CorruptMessage(format!(
            "implausible matrix {rows}x{cols}"
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let x = read_f64_le(r)?;
        if !x.is_finite() {
            return Err(Error::CorruptMessage("non-finite matrix entry".into()));
        }
        data.push(S::of(x));
    }
    DenseMatrix::new(rows, cols, data)
}

/// Writes a dataset in the columnar binary format (little-endian, 64-bit
/// floats).
pub fn write_dataset<S: Scalar>(ds: &MultiViewDataset<S>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATA_MAGIC)?;
    write_u16_le(&mut w, FORMAT_VERSION)?;
    write_u32_le(&mut w, ds.agent_count() as u32)?;
    write_u32_le(&mut w, ds.class_count as u32)?;
    write_u32_le(&mut w, ds.object_count() as u32)?;
    write_u32_le(&mut w, ds.train_per_class as u32)?;
    write_u32_le(&mut w, ds.holdout_per_class as u32)?;
    write_f64_le(&mut w, ds.noise_sigma)?;
    for &l in &ds.labels {
        write_u32_le(&mut w, l as u32)?;
    }
    for &o in &ds.object_ids {
        write_u32_le(&mut w, o)?;
    }
    match &ds.latent {
        Some(latent) => {
            w.write_all(&[1])?;
            write_matrix(&mut w, latent)?;
        }
        None => w.write_all(&[0])?,
    }
    for view in &ds.views {
        match &view.map {
            ViewMap::Identity => w.write_all(&[0])?,
            ViewMap::Linear(a) => {
                w.write_all(&[1])?;
                write_matrix(&mut w, a)?;
            }
            ViewMap::External => w.write_all(&[2])?,
        }
        write_matrix(&mut w, &view.samples)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset<S: Scalar>(path: &Path) -> Result<MultiViewDataset<S>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATA_MAGIC {
        return Err(Error::CorruptMessage(format!(
            "bad dataset magic {magic:02x?}"
        )));
    }
    let version = read_u16_le(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::CorruptMessage(format!(
            "unsupported dataset version {version}"
        )));
    }
    let n_agents = read_u32_le(&mut r)? as usize;
    let class_count = read_u32_le(&mut r)? as usize;
    let m = read_u32_le(&mut r)? as usize;
    let train_per_class = read_u32_le(&mut r)? as usize;
    let holdout_per_class = read_u32_le(&mut r)? as usize;
    let noise_sigma = read_f64_le(&mut r)?;
    let mut labels = Vec::with_capacity(m);
    for _ in 0..m {
        let l = read_u32_le(&mut r)? as usize;
        if l >= class_count {
            return Err(Error::CorruptMessage(format!("label {l} out of range")));
        }
        labels.push(l);
    }
    let mut object_ids = Vec::with_capacity(m);
    for _ in 0..m {
        object_ids.push(read_u32_le(&mut r)?);
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let latent = if flag[0] == 1 {
        Some(read_matrix(&mut r)?)
    } else {
        None
    };
    let mut views = Vec::with_capacity(n_agents);
    for _ in 0..n_agents {
        r.read_exact(&mut flag)?;
        let map = match flag[0] {
            0 => ViewMap::Identity,
            1 => ViewMap::Linear(read_matrix(&mut r)?),
            2 => ViewMap::External,
            other => {
                return Err(Error::CorruptMessage(format!("bad view map tag {other}")));
            }
        };
        let samples = read_matrix(&mut r)?;
        if samples.cols() != m {
            return Err(Error::CorruptMessage(format!(
                "agent has {} samples, expected {m}",
                samples.cols()
            )));
        }
        views.push(AgentView { map, samples });
    }
    Ok(MultiViewDataset {
        labels,
        object_ids,
        latent,
        views,
        class_count,
        train_per_class,
        holdout_per_class,
        noise_sigma,
    })
}

/// Writes the ground truth structure alongside a dataset.
pub fn write_ground_truth<S: Scalar>(gt: &GroundTruth<S>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TRUTH_MAGIC)?;
    write_u16_le(&mut w, FORMAT_VERSION)?;
    write_u32_le(&mut w, gt.class_count() as u32)?;
    for &c in &gt.class_dims {
        write_u32_le(&mut w, c as u32)?;
    }
    write_u32_le(&mut w, gt.coverage.len() as u32)?;
    write_f64_le(&mut w, gt.beta.to_f64_lossy())?;
    write_matrix(&mut w, gt.global_basis.matrix())?;
    for o in &gt.coverage {
        write_matrix(&mut w, o)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a ground truth file written by [`write_ground_truth`].
pub fn read_ground_truth<S: Scalar>(path: &Path) -> Result<GroundTruth<S>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TRUTH_MAGIC {
        return Err(Error::CorruptMessage(format!(
            "bad ground truth magic {magic:02x?}"
        )));
    }
    let version = read_u16_le(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::CorruptMessage(format!(
            "unsupported ground truth version {version}"
        )));
    }
    let k = read_u32_le(&mut r)? as usize;
    let mut class_dims = Vec::with_capacity(k);
    for _ in 0..k {
        class_dims.push(read_u32_le(&mut r)? as usize);
    }
    let n = read_u32_le(&mut r)? as usize;
    let beta = S::of(read_f64_le(&mut r)?);
    let global_basis = OrthonormalBasis::new(read_matrix(&mut r)?)?;
    let mut coverage = Vec::with_capacity(n);
    for _ in 0..n {
        coverage.push(read_matrix::<S, _>(&mut r)?);
    }
    let agent_bases = coverage
        .iter()
        .map(|o| OrthonormalBasis::new(global_basis.matrix().matmul(o)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(GroundTruth {
        global_basis,
        class_dims,
        coverage,
        agent_bases,
        beta,
    })
}

/// Reads per-agent delimited text files: one sample per row, view features
/// first, then an integer class label, then an integer object id. Fields
/// split on commas, semicolons, tabs or spaces.
pub fn read_delimited_dataset<S: Scalar>(
    paths: &[&Path],
    class_count: usize,
) -> Result<MultiViewDataset<S>> {
    if paths.is_empty() {
        return Err(Error::InvalidCount("no input files".into()));
    }
    let mut views = Vec::new();
    let mut labels: Option<Vec<usize>> = None;
    let mut object_ids: Option<Vec<u32>> = None;
    for path in paths {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut file_labels = Vec::new();
        let mut file_objects = Vec::new();
        for (line_no, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed
                .split([',', ';', '\t', ' '])
                .filter(|f| !f.is_empty())
                .collect();
            if fields.len() < 3 {
                return Err(Error::CorruptMessage(format!(
                    "{}:{}: need features, label, object id",
                    path.display(),
                    line_no + 1
                )));
            }
            let feat: Vec<f64> = fields[..fields.len() - 2]
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|e| {
                        Error::CorruptMessage(format!(
                            "{}:{}: bad number {f:?}: {e}",
                            path.display(),
                            line_no + 1
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            let label: usize = fields[fields.len() - 2].parse().map_err(|e| {
                Error::CorruptMessage(format!("{}:{}: bad label: {e}", path.display(), line_no + 1))
            })?;
            if label >= class_count {
                return Err(Error::InvalidPartition { label, class_count });
            }
            let object: u32 = fields[fields.len() - 1].parse().map_err(|e| {
                Error::CorruptMessage(format!(
                    "{}:{}: bad object id: {e}",
                    path.display(),
                    line_no + 1
                ))
            })?;
            if let Some(first) = rows.first() {
                if feat.len() != first.len() {
                    return Err(Error::CorruptMessage(format!(
                        "{}:{}: ragged feature width",
                        path.display(),
                        line_no + 1
                    )));
                }
            }
            rows.push(feat);
            file_labels.push(label);
            file_objects.push(object);
        }
        if rows.is_empty() {
            return Err(Error::InvalidCount(format!("{} is empty", path.display())));
        }
        match (&labels, &object_ids) {
            (None, _) => {
                labels = Some(file_labels);
                object_ids = Some(file_objects);
            }
            (Some(l), Some(o)) => {
                if *l != file_labels || *o != file_objects {
                    return Err(Error::CorruptMessage(format!(
                        "{}: labels or object ids disagree with the first agent",
                        path.display()
                    )));
                }
            }
            _ => unreachable!(),
        }
        let view_dim = rows[0].len();
        let samples = DenseMatrix::from_fn(view_dim, rows.len(), |r, c| S::of(rows[c][r]));
        if !samples.is_finite() {
            return Err(Error::CorruptMessage(format!(
                "{}: non-finite feature",
                path.display()
            )));
        }
        views.push(AgentView {
            map: ViewMap::External,
            samples,
        });
    }
    let labels = labels.unwrap();
    let object_ids = object_ids.unwrap();
    let m = labels.len();
    Ok(MultiViewDataset {
        labels,
        object_ids,
        latent: None,
        views,
        class_count,
        train_per_class: m, // imported data is all training
        holdout_per_class: 0,
        noise_sigma: 0.0,
    })
}
