//! Scalar abstraction for the numeric core.
//!
//! Everything numeric is generic over [`Scalar`], implemented for `f32` and
//! `f64`. Training, persistence and the CLI pin `f64` (see the aliases at the
//! crate root); `f32` exists for callers that trade precision for footprint.

use num_traits::{Float, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type for tensors, tapes and model parameters.
pub trait Scalar:
    Float + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    /// Exact-as-possible conversion from `f64` (literals, counts, config).
    fn from_f64(v: f64) -> Self;
    /// Widening (or identity) conversion used by telemetry and persistence.
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
