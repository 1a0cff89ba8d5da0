//! Latent video diffusion with a spatio-temporal transformer backbone.

pub mod autograd;
pub mod conditioning;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod run;
pub mod sampler;
pub mod schedule;
pub mod training;

pub use error::{Result, VdtError};

/// Latent clip `(frames, height, width, channels)`.
pub type LatentClip = ndarray::Array4<f64>;
/// RGB clip `(frames, height, width, 3)` with values in `[0, 1]`.
pub type VideoClip = ndarray::Array4<f64>;
