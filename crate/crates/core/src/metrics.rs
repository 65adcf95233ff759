//! Evaluation quantities: cosine-similarity structure, nearest-subspace
//! classification, same-object/different-object similarity, Fisher ratio,
//! the per-round fusion cost estimate, and plot-ready exports.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{dot, DenseMatrix, ProjectionOperator};
use crate::rate::FeatureMatrix;
use crate::scalar::Scalar;

/// Cosine similarities of pooled feature columns under a documented
/// ordering: samples sorted by (class, object id, agent).
#[derive(Debug, Clone)]
pub struct SimilarityMatrix<S> {
    matrix: DenseMatrix<S>,
    /// (class, object id, agent) per row/column.
    pub ordering: Vec<(usize, u32, usize)>,
}

impl<S: Scalar> SimilarityMatrix<S> {
    pub fn matrix(&self) -> &DenseMatrix<S> {
        &self.matrix
    }

    pub fn size(&self) -> usize {
        self.matrix.rows()
    }

    /// Mean |cosine| over off-diagonal same-class pairs.
    pub fn within_class_mean_abs(&self) -> S {
        self.block_mean(true)
    }

    /// Mean |cosine| over different-class pairs.
    pub fn cross_class_mean_abs(&self) -> S {
        self.block_mean(false)
    }

    fn block_mean(&self, same: bool) -> S {
        let n = self.size();
        let mut acc = S::zero();
        let mut count = 0usize;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let pair_same = self.ordering[i].0 == self.ordering[j].0;
                if pair_same == same {
                    acc += self.matrix.get(i, j).abs();
                    count += 1;
                }
            }
        }
        if count == 0 {
            S::zero()
        } else {
            acc / S::from_usize(count).unwrap()
        }
    }
}

/// Builds the Gram matrix of unit-norm features pooled across agents,
/// ordered by (class, object id, agent).
pub fn cosine_similarity_matrix<S: Scalar>(
    features: &[FeatureMatrix<S>],
    labels: &[usize],
    object_ids: &[u32],
) -> Result<SimilarityMatrix<S>> {
    if features.is_empty() {
        return Err(Error::InvalidCount("no feature blocks".into()));
    }
    let m = labels.len();
    if object_ids.len() != m || features.iter().any(|f| f.sample_count() != m) {
        return Err(Error::DimensionMismatch(
            "labels/object ids/features disagree on sample count".into(),
        ));
    }
    let mut ordering: Vec<(usize, u32, usize)> = Vec::with_capacity(m * features.len());
    for (agent, _) in features.iter().enumerate() {
        for j in 0..m {
            ordering.push((labels[j], object_ids[j], agent));
        }
    }
    // Sort the pooled index set by (class, object, agent); remember the
    // source column for gathering.
    let mut source: Vec<(usize, usize)> = Vec::with_capacity(ordering.len());
    for (agent, _) in features.iter().enumerate() {
        for j in 0..m {
            source.push((agent, j));
        }
    }
    let mut perm: Vec<usize> = (0..ordering.len()).collect();
    perm.sort_by_key(|&i| ordering[i]);
    let ordering: Vec<(usize, u32, usize)> = perm.iter().map(|&i| ordering[i]).collect();

    let d = features[0].feature_dim();
    let mut pooled = DenseMatrix::zeros(d, perm.len());
    for (slot, &i) in perm.iter().enumerate() {
        let (agent, col) = source[i];
        pooled
            .col_mut(slot)
            .copy_from_slice(features[agent].matrix().col(col));
    }
    let matrix = pooled.gram_t();
    Ok(SimilarityMatrix { matrix, ordering })
}

/// Nearest-subspace rule: label = argmax_k ‖P_k z‖², ties going to the
/// lowest class index. Invariant to positive scaling of the columns.
pub fn nearest_subspace_classify<S: Scalar>(
    z: &FeatureMatrix<S>,
    projectors: &[ProjectionOperator<S>],
) -> Result<Vec<usize>> {
    if projectors.is_empty() {
        return Err(Error::InvalidCount("no projectors".into()));
    }
    let zm = z.matrix();
    let mut scores = Vec::with_capacity(projectors.len());
    for p in projectors {
        let pz = p.apply(zm)?;
        let col_scores: Vec<S> = (0..pz.cols()).map(|c| dot(pz.col(c), pz.col(c))).collect();
        scores.push(col_scores);
    }
    let mut labels = Vec::with_capacity(zm.cols());
    for j in 0..zm.cols() {
        let mut best = 0usize;
        let mut best_score = scores[0][j];
        for (k, s) in scores.iter().enumerate().skip(1) {
            if s[j] > best_score {
                best_score = s[j];
                best = k;
            }
        }
        labels.push(best);
    }
    Ok(labels)
}

/// Fraction of matching labels.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch("label vectors differ".into()));
    }
    if predicted.is_empty() {
        return Err(Error::InvalidCount("no labels".into()));
    }
    let hits = predicted
        .iter()
        .zip(truth)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Similarity and scatter statistics of per-agent features over aligned
/// objects.
#[derive(Debug, Clone)]
pub struct SisDisFisher {
    /// Mean cosine over pairs of features of the same object seen by
    /// different agents; `None` when no alignment index is available.
    pub sis: Option<f64>,
    /// Mean cosine over pairs of distinct objects within the same class,
    /// computed within each agent and averaged over agents.
    pub dis: f64,
    /// Between-class scatter trace over within-class scatter trace of the
    /// pooled features; `+inf` when the within-class scatter vanishes.
    pub fisher_ratio: f64,
}

/// Computes SIS/DIS/Fisher-ratio over per-agent features with shared
/// labels. Column j of every block must be the same physical object;
/// passing the shared object ids enables the cross-view SIS statistic.
pub fn sis_dis_fisher<S: Scalar>(
    features: &[FeatureMatrix<S>],
    labels: &[usize],
    alignment: Option<&[u32]>,
) -> Result<SisDisFisher> {
    if features.is_empty() {
        return Err(Error::InvalidCount("no feature blocks".into()));
    }
    let m = labels.len();
    if features.iter().any(|f| f.sample_count() != m) {
        return Err(Error::DimensionMismatch(
            "feature blocks disagree with labels".into(),
        ));
    }

    // SIS: same object, different agents.
    let sis = match alignment {
        None => None,
        Some(ids) => {
            if ids.len() != m {
                return Err(Error::MetricUnavailable(
                    "alignment index length mismatch".into(),
                ));
            }
            let mut acc = 0.0f64;
            let mut count = 0usize;
            for j in 0..m {
                for a in 0..features.len() {
                    for b in (a + 1)..features.len() {
                        let c = dot(features[a].matrix().col(j), features[b].matrix().col(j));
                        acc += c.to_f64_lossy();
                        count += 1;
                    }
                }
            }
            if count == 0 {
                None
            } else {
                Some(acc / count as f64)
            }
        }
    };

    // DIS: distinct objects within a class, per agent, then averaged.
    let mut agent_means = Vec::with_capacity(features.len());
    for f in features {
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for i in 0..m {
            for j in (i + 1)..m {
                if labels[i] == labels[j] {
                    acc += dot(f.matrix().col(i), f.matrix().col(j)).to_f64_lossy();
                    count += 1;
                }
            }
        }
        if count > 0 {
            agent_means.push(acc / count as f64);
        }
    }
    let dis = if agent_means.is_empty() {
        0.0
    } else {
        agent_means.iter().sum::<f64>() / agent_means.len() as f64
    };

    // Fisher ratio over pooled features.
    let class_count = labels.iter().copied().max().map_or(0, |v| v + 1);
    let d = features[0].feature_dim();
    let total = m * features.len();
    let mut global_mean = vec![0.0f64; d];
    let mut class_mean = vec![vec![0.0f64; d]; class_count];
    let mut class_n = vec![0usize; class_count];
    for f in features {
        for j in 0..m {
            let col = f.matrix().col(j);
            for (i, x) in col.iter().enumerate() {
                let v = x.to_f64_lossy();
                global_mean[i] += v;
                class_mean[labels[j]][i] += v;
            }
            class_n[labels[j]] += 1;
        }
    }
    for x in &mut global_mean {
        *x /= total as f64;
    }
    for (k, mean) in class_mean.iter_mut().enumerate() {
        if class_n[k] > 0 {
            for x in mean.iter_mut() {
                *x /= class_n[k] as f64;
            }
        }
    }
    let mut within = 0.0f64;
    for f in features {
        for j in 0..m {
            let col = f.matrix().col(j);
            let mean = &class_mean[labels[j]];
            for (i, x) in col.iter().enumerate() {
                let dev = x.to_f64_lossy() - mean[i];
                within += dev * dev;
            }
        }
    }
    let mut between = 0.0f64;
    for k in 0..class_count {
        if class_n[k] == 0 {
            continue;
        }
        let mut dist = 0.0f64;
        for i in 0..d {
            let dev = class_mean[k][i] - global_mean[i];
            dist += dev * dev;
        }
        between += class_n[k] as f64 * dist;
    }
    let fisher_ratio = if within <= f64::EPSILON * total as f64 {
        f64::INFINITY
    } else {
        between / within
    };

    Ok(SisDisFisher {
        sis,
        dis,
        fisher_ratio,
    })
}

/// Predicted floating-point operation count of one fusion round:
/// `Σ_k (M·d·p_k + N·d·p_k·P_k)` with `M` the total sample count. Exact
/// integer arithmetic.
pub fn fusion_cost_estimate(
    agents: u64,
    feature_dim: u64,
    total_samples: u64,
    local_ranks: &[u64],
    fused_ranks: &[u64],
) -> Result<u64> {
    if local_ranks.len() != fused_ranks.len() {
        return Err(Error::ConfigError(
            "per-class rank lists differ in length".into(),
        ));
    }
    let mut total: u64 = 0;
    for (&p, &cap) in local_ranks.iter().zip(fused_ranks) {
        let svd_term = total_samples
            .checked_mul(feature_dim)
            .and_then(|x| x.checked_mul(p))
            .ok_or_else(|| Error::ConfigError("cost overflow".into()))?;
        let fuse_term = agents
            .checked_mul(feature_dim)
            .and_then(|x| x.checked_mul(p))
            .and_then(|x| x.checked_mul(cap))
            .ok_or_else(|| Error::ConfigError("cost overflow".into()))?;
        total = total
            .checked_add(svd_term)
            .and_then(|x| x.checked_add(fuse_term))
            .ok_or_else(|| Error::ConfigError("cost overflow".into()))?;
    }
    Ok(total)
}

/// Writes the similarity matrix as tab-separated text; values round-trip
/// exactly through the shortest-representation float formatting.
pub fn export_similarity_tsv<S: Scalar>(sim: &SimilarityMatrix<S>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let n = sim.size();
    for i in 0..n {
        for j in 0..n {
            if j > 0 {
                w.write_all(b"\t")?;
            }
            write!(w, "{}", sim.matrix.get(i, j).to_f64_lossy())?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a matrix written by [`export_similarity_tsv`].
pub fn import_similarity_tsv(path: &Path) -> Result<DenseMatrix<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split('\t')
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::CorruptMessage(format!("bad float {f:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidCount("empty matrix file".into()));
    }
    let n = rows.len();
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(Error::CorruptMessage("ragged matrix file".into()));
    }
    let out = DenseMatrix::from_fn(n, rows[0].len(), |r, c| rows[r][c]);
    if !out.is_finite() {
        return Err(Error::CorruptMessage("non-finite entry".into()));
    }
    Ok(out)
}

/// Maps a cosine in [-1, 1] onto a blue-white-red ramp.
fn heat_color(v: f64) -> [u8; 3] {
    let t = v.clamp(-1.0, 1.0);
    let scale = |x: f64| (x * 255.0).round().clamp(0.0, 255.0) as u8;
    if t <= 0.0 {
        [scale(1.0 + t), scale(1.0 + t), 255]
    } else {
        [255, scale(1.0 - t), scale(1.0 - t)]
    }
}

/// Writes the similarity matrix as a binary portable pixmap (P6) with a
/// fixed blue-white-red ramp over [-1, 1]. Deterministic bytes for a
/// fixed input.
pub fn export_heatmap_ppm<S: Scalar>(sim: &SimilarityMatrix<S>, path: &Path) -> Result<()> {
    let n = sim.size();
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{n} {n}\n255\n")?;
    for i in 0..n {
        for j in 0..n {
            w.write_all(&heat_color(sim.matrix.get(i, j).to_f64_lossy()))?;
        }
    }
    w.flush()?;
    Ok(())
}
