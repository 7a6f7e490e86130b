//! Single-image dehazing: haze synthesis, a patch-wise CNN estimator of
//! transmittance and airlight, edge-aware interpolation of the transmittance
//! map and radiance recovery.

pub mod error;
pub mod haze;
pub mod image;
pub mod interp;
pub mod nn;
pub mod patch;
pub mod pipeline;
pub mod procedural;
pub mod synth;

pub use error::{Error, Result};
