//! Ambiguity-aware point cloud segmentation: label-geometry ambiguity,
//! adaptive-margin contrastive learning, ambiguity prediction and masked
//! refinement on a small encoder-decoder.

pub mod aef;
pub mod apm;
pub mod autograd;
pub mod cli;
pub mod cloudgeom;
pub mod error;
pub mod margin_contrast;
pub mod metrics;
pub mod nettrain;
pub mod refine;

pub use error::{Error, Result};
