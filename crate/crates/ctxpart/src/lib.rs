//! Context-partitioned language model library.
//!
//! A small transformer whose feed-forward hidden units are partitioned into
//! context-specialized segments. Gradient attribution collected during
//! training drives periodic re-clustering of the units; a learned gate mixes
//! segment outputs per token. Everything is generic over the scalar type
//! (`f32` or `f64`); training and persistence pin `f64` via the aliases
//! exported at the crate root.

pub mod autodiff;
pub mod corpus;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod params_io;
pub mod partitioner;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use scalar::Scalar;

/// Default-precision tensor used by the trainer, CLI and persistence.
pub type Tensor64 = tensor::Tensor<f64>;
/// Default-precision autodiff tape.
pub type Tape64 = autodiff::Tape<f64>;
/// Default-precision parameter store (what training produces and
/// persistence reads back).
pub type ParameterStore64 = model::ParameterStore<f64>;
/// Default-precision single-sequence forward values.
pub type ForwardValues64 = model::ForwardValues<f64>;
