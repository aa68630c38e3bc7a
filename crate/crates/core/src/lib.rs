//! Numeric core for multi-stream talking-head generation experiments.
//!
//! The crate is organized around three concerns:
//!
//! - **Attention**: a masked multi-head cross-attention kernel, the per-identity
//!   audio-face attention built on it, and hand-written backward passes for
//!   gradient checking.
//! - **Data plumbing**: pixel-space face masks lowered onto token grids,
//!   side-by-side pair composition for two-person training clips, and the
//!   curation filters that admit clips into that pipeline.
//! - **Measurement**: landmark motion, interactivity, and lip-sync summary
//!   scores over annotated conversational segments.
//!
//! All numeric code is generic over [`scalar::Scalar`]; the crate root exports
//! `f32` aliases for the training path and `f64` aliases for oracle work.

pub mod afca;
pub mod attention;
pub mod augment;
pub mod curation;
pub mod error;
pub mod grid;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod rng;
pub mod scalar;
#[cfg(test)]
pub(crate) mod testutil;
pub mod toy;

pub use error::{CoreError, ShapeError, ValidationError};
pub use scalar::Scalar;

/// Training-precision token grid.
pub type VideoTokenGrid32 = grid::VideoTokenGrid<f32>;
/// Oracle-precision token grid.
pub type VideoTokenGrid64 = grid::VideoTokenGrid<f64>;

/// Training-precision identity stream.
pub type IdentityStream32 = afca::IdentityStream<f32>;
/// Oracle-precision identity stream.
pub type IdentityStream64 = afca::IdentityStream<f64>;

/// Training-precision attention weights.
pub type AfcaWeights32 = afca::AfcaWeights<f32>;
/// Oracle-precision attention weights.
pub type AfcaWeights64 = afca::AfcaWeights<f64>;

/// Training-precision toy denoiser.
pub type ToyModel32 = toy::ToyModel<f32>;
/// Oracle-precision toy denoiser.
pub type ToyModel64 = toy::ToyModel<f64>;
