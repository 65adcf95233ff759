//! Compositional distributed learning for multi-view perception.
//!
//! Agents learn class-wise feature subspaces under a coding-rate-reduction
//! objective, periodically exchange truncated SVD bases, fuse them into
//! global class subspaces, and align their features to the fused subspaces
//! through a projection loss. The crate bundles the numerical core, a
//! deterministic multi-agent training simulator, certification suites for
//! the governing inequalities, and evaluation/reporting utilities.
//!
//! The numerical core is generic over the scalar type ([`scalar::Scalar`],
//! implemented for `f32` and `f64`); the aliases below fix the default
//! `f64` instantiation used by the simulator and the CLI.

pub mod encoder;
pub mod error;
pub mod fusion;
pub mod linalg;
pub mod metrics;
pub mod orchestrator;
pub mod rate;
pub mod scalar;
pub mod synth;
pub mod theory;
pub mod util;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default-precision dense matrix.
pub type Mat = linalg::DenseMatrix<f64>;
/// Default-precision orthonormal basis.
pub type Basis = linalg::OrthonormalBasis<f64>;
/// Default-precision projector.
pub type Projector = linalg::ProjectionOperator<f64>;
/// Default-precision feature matrix.
pub type Features = rate::FeatureMatrix<f64>;
/// Default-precision rate configuration.
pub type Rate = rate::RateConfig<f64>;
