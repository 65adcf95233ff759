//! Scalar abstraction: the numerical core is generic over the floating-point
//! type. Concrete aliases for the common `f64` instantiation live in the
//! crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable by every numerical routine in the crate.
///
/// Validation tolerances scale with the precision of the scalar, so the
/// same code runs in `f64` (the default) and in `f32` with proportionally
/// looser invariants.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Max allowed `|U^T U - I|` entry for an orthonormal basis.
    fn orthonormal_tol() -> Self;
    /// Max allowed deviation of a feature column norm from 1.
    fn unit_norm_tol() -> Self;
    /// Relative reconstruction tolerance for the SVD, `|A - UΣV^T| <= tol·|A|`.
    fn reconstruction_tol() -> Self;
    /// Relative cutoff below which a singular value is treated as zero.
    fn rank_cutoff() -> Self;

    /// Shorthand for lossy conversion of an `f64` constant.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("constant representable in scalar type")
    }
    /// Lossy conversion to `f64` for reporting.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    fn orthonormal_tol() -> Self {
        1e-10
    }
    fn unit_norm_tol() -> Self {
        1e-8
    }
    fn reconstruction_tol() -> Self {
        1e-8
    }
    fn rank_cutoff() -> Self {
        1e-12
    }
}

impl Scalar for f32 {
    fn orthonormal_tol() -> Self {
        1e-4
    }
    fn unit_norm_tol() -> Self {
        1e-3
    }
    fn reconstruction_tol() -> Self {
        1e-3
    }
    fn rank_cutoff() -> Self {
        1e-6
    }
}
