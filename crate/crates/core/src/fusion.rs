//! Per-class basis extraction, concatenation across agents, fused-basis
//! SVD, projector construction, and the wire format for exchanged bases.
//!
//! Wire format (little-endian): magic `MCRB`, version u16 = 1, agent_id
//! u32, class_id u32, round u32, d u32, p u32, then d·p basis entries as
//! 64-bit IEEE-754 column-major, then p singular values as 64-bit floats.
//! Files may hold any number of concatenated messages; the reader streams
//! until EOF.

use std::io::Read;

use crate::error::{Error, Result};
use crate::linalg::{
    projector_from_basis, thin_svd, truncate_basis, DenseMatrix, OrthonormalBasis,
    ProjectionOperator,
};
use crate::rate::FeatureMatrix;
use crate::scalar::Scalar;
use crate::util::{read_f64_le, read_u16_le, read_u32_le};

const MAGIC: &[u8; 4] = b"MCRB";
const VERSION: u16 = 1;

/// One agent's truncated basis for one class in one round.
#[derive(Debug, Clone)]
pub struct BasisMessage<S> {
    pub agent_id: u32,
    pub class_id: u32,
    pub round: u32,
    pub basis: OrthonormalBasis<S>,
    /// Retained singular values, diagnostic only.
    pub singular_values: Vec<S>,
}

/// Per-class truncation ranks: `local[k]` columns leave each agent,
/// `fused[k]` columns survive fusion.
#[derive(Debug, Clone)]
pub struct FusionConfig {
    pub feature_dim: usize,
    local: Vec<usize>,
    fused: Vec<usize>,
}

impl FusionConfig {
    /// Same ranks for every class.
    pub fn uniform(
        feature_dim: usize,
        class_count: usize,
        local_rank: usize,
        fused_rank: usize,
    ) -> Result<Self> {
        Self::per_class(
            feature_dim,
            vec![local_rank; class_count],
            vec![fused_rank; class_count],
        )
    }

    pub fn per_class(feature_dim: usize, local: Vec<usize>, fused: Vec<usize>) -> Result<Self> {
        if local.len() != fused.len() {
            return Err(Error::ConfigError(
                "per-class rank lists differ in length".into(),
            ));
        }
        for (&p, &cap) in local.iter().zip(&fused) {
            if p == 0 || p > feature_dim {
                return Err(Error::ConfigError(format!(
                    "local rank {p} outside [1, {feature_dim}]"
                )));
            }
            if cap == 0 || cap > feature_dim {
                return Err(Error::ConfigError(format!(
                    "fused rank {cap} outside [1, {feature_dim}]"
                )));
            }
        }
        Ok(Self {
            feature_dim,
            local,
            fused,
        })
    }

    pub fn class_count(&self) -> usize {
        self.local.len()
    }

    pub fn local_rank(&self, k: usize) -> usize {
        self.local[k]
    }

    pub fn fused_rank(&self, k: usize) -> usize {
        self.fused[k]
    }
}

/// SVD of one class block, truncated to the leading `p_k` directions.
pub fn extract_local_basis<S: Scalar>(
    z_k: &FeatureMatrix<S>,
    p_k: usize,
    agent_id: u32,
    class_id: u32,
    round: u32,
) -> Result<BasisMessage<S>> {
    if z_k.sample_count() == 0 {
        return Err(Error::EmptyClass {
            class_id: class_id as usize,
        });
    }
    let limit = z_k.feature_dim().min(z_k.sample_count());
    if p_k == 0 || p_k > limit {
        return Err(Error::InvalidTruncation {
            requested: p_k,
            available: limit,
        });
    }
    let svd = thin_svd(z_k.matrix())?;
    let basis = truncate_basis(&svd, p_k)?;
    Ok(BasisMessage {
        agent_id,
        class_id,
        round,
        singular_values: svd.singular_values[..p_k].to_vec(),
        basis,
    })
}

/// Column-block concatenation of one class's messages in agent-id order.
pub fn concatenate_bases<S: Scalar>(messages: &[BasisMessage<S>]) -> Result<DenseMatrix<S>> {
    if messages.is_empty() {
        return Err(Error::InconsistentMessages("no messages".into()));
    }
    let class_id = messages[0].class_id;
    let round = messages[0].round;
    let dim = messages[0].basis.dim_ambient();
    for m in messages {
        if m.class_id != class_id || m.round != round {
            return Err(Error::InconsistentMessages(format!(
                "mixed class/round: ({}, {}) vs ({}, {})",
                m.class_id, m.round, class_id, round
            )));
        }
        if m.basis.dim_ambient() != dim {
            return Err(Error::InconsistentMessages(format!(
                "ambient dim {} vs {}",
                m.basis.dim_ambient(),
                dim
            )));
        }
    }
    let mut order: Vec<usize> = (0..messages.len()).collect();
    order.sort_by_key(|&i| messages[i].agent_id);
    for w in order.windows(2) {
        if messages[w[0]].agent_id == messages[w[1]].agent_id {
            return Err(Error::InconsistentMessages(format!(
                "duplicate agent {}",
                messages[w[0]].agent_id
            )));
        }
    }
    let blocks: Vec<&DenseMatrix<S>> = order.iter().map(|&i| messages[i].basis.matrix()).collect();
    DenseMatrix::hstack(&blocks)
}

/// Fused basis along with a degeneracy flag.
#[derive(Debug, Clone)]
pub struct FusedBasis<S> {
    pub basis: OrthonormalBasis<S>,
    /// True when the concatenation's numerical rank fell below the fused
    /// rank; the missing directions are padded with an orthonormal
    /// completion. Early rounds with degenerate features can do this.
    pub rank_deficient: bool,
    /// Leading singular values of the concatenation, diagnostic only.
    pub singular_values: Vec<S>,
}

/// SVD of the concatenated bases, keeping the leading `cap` left singular
/// vectors: duplicated directions appear once, complementary information
/// is preserved, and the result is globally orthonormal.
pub fn fuse_bases<S: Scalar>(concat: &DenseMatrix<S>, cap: usize) -> Result<FusedBasis<S>> {
    let limit = concat.rows().min(concat.cols());
    if cap == 0 || cap > limit {
        return Err(Error::InvalidTruncation {
            requested: cap,
            available: limit,
        });
    }
    let svd = thin_svd(concat)?;
    let cutoff = svd.singular_values[0] * S::rank_cutoff();
    let numerical_rank = svd
        .singular_values
        .iter()
        .take_while(|&&s| s > cutoff && s > S::zero())
        .count();
    let basis = truncate_basis(&svd, cap)?;
    Ok(FusedBasis {
        basis,
        rank_deficient: numerical_rank < cap,
        singular_values: svd.singular_values[..cap].to_vec(),
    })
}

/// Projectors `P_k = U_k U_k^T` for each fused class basis.
pub fn build_projectors<S: Scalar>(fused: &[OrthonormalBasis<S>]) -> Vec<ProjectionOperator<S>> {
    fused.iter().map(projector_from_basis).collect()
}

/// Serializes a message into the wire format.
pub fn serialize_basis<S: Scalar>(msg: &BasisMessage<S>) -> Vec<u8> {
    let d = msg.basis.dim_ambient();
    let p = msg.basis.dim_subspace();
    let mut out = Vec::with_capacity(26 + 8 * (d * p + p));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&msg.agent_id.to_le_bytes());
    out.extend_from_slice(&msg.class_id.to_le_bytes());
    out.extend_from_slice(&msg.round.to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(p as u32).to_le_bytes());
    for x in msg.basis.matrix().data() {
        out.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
    }
    for s in &msg.singular_values {
        out.extend_from_slice(&s.to_f64_lossy().to_le_bytes());
    }
    out
}

fn read_version_and_body<S: Scalar, R: Read>(r: &mut R) -> Result<BasisMessage<S>> {
    let version =
        read_u16_le(r).map_err(|e| Error::CorruptMessage(format!("truncated version: {e}")))?;
    if version != VERSION {
        return Err(Error::CorruptMessage(format!(
            "unsupported version {version}"
        )));
    }
    let mut field = |name: &str| -> Result<u32> {
        read_u32_le(r).map_err(|e| Error::CorruptMessage(format!("truncated {name}: {e}")))
    };
    let agent_id = field("agent_id")?;
    let class_id = field("class_id")?;
    let round = field("round")?;
    let d = field("d")? as usize;
    let p = field("p")? as usize;
    if d == 0 || p == 0 || p > d || d > (1 << 20) {
        return Err(Error::CorruptMessage(format!(
            "implausible dimensions d={d}, p={p}"
        )));
    }
    let mut data = Vec::with_capacity(d * p);
    for i in 0..d * p {
        let x = read_f64_le(r)
            .map_err(|e| Error::CorruptMessage(format!("truncated entry {i}: {e}")))?;
        if !x.is_finite() {
            return Err(Error::CorruptMessage(format!("non-finite entry {i}")));
        }
        data.push(S::of(x));
    }
    let mut singular_values = Vec::with_capacity(p);
    for i in 0..p {
        let x = read_f64_le(r)
            .map_err(|e| Error::CorruptMessage(format!("truncated singular value {i}: {e}")))?;
        if !x.is_finite() {
            return Err(Error::CorruptMessage(format!(
                "non-finite singular value {i}"
            )));
        }
        singular_values.push(S::of(x));
    }
    let matrix = DenseMatrix::new(d, p, data)
        .map_err(|e| Error::CorruptMessage(format!("bad payload: {e}")))?;
    let basis = OrthonormalBasis::new(matrix)?;
    Ok(BasisMessage {
        agent_id,
        class_id,
        round,
        basis,
        singular_values,
    })
}

/// Reads one message from a stream.
pub fn read_basis<S: Scalar, R: Read>(r: &mut R) -> Result<BasisMessage<S>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::CorruptMessage(format!("truncated header: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::CorruptMessage(format!(
            "bad magic {:02x?}, expected {:02x?}",
            magic, MAGIC
        )));
    }
    read_version_and_body(r)
}

/// Parses one message from a byte slice.
pub fn deserialize_basis<S: Scalar>(bytes: &[u8]) -> Result<BasisMessage<S>> {
    let mut cursor = bytes;
    read_basis(&mut cursor)
}

/// Streams messages until EOF; errors on a partial trailing record.
pub fn read_basis_stream<S: Scalar, R: Read>(r: &mut R) -> Result<Vec<BasisMessage<S>>> {
    let mut out = Vec::new();
    loop {
        // One byte distinguishes clean EOF from a truncated record.
        let mut first = [0u8; 1];
        if r.read(&mut first)? == 0 {
            return Ok(out);
        }
        let mut rest = [0u8; 3];
        r.read_exact(&mut rest)
            .map_err(|e| Error::CorruptMessage(format!("truncated magic: {e}")))?;
        let magic = [first[0], rest[0], rest[1], rest[2]];
        if &magic != MAGIC {
            return Err(Error::CorruptMessage(format!(
                "bad magic {magic:02x?} in stream"
            )));
        }
        out.push(read_version_and_body(r)?);
    }
}
