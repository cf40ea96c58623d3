//! Attention-uncertainty scoring and selection of diffusion noise seeds.
//!
//! Candidate initial latents are scored by how much their attention maps
//! disagree under stochastic perturbation; the least uncertain seed is
//! kept for sampling. A small fixed-weight diffusion simulator provides
//! attention maps end to end without a trained model.

pub mod acquisition;
pub mod analysis;
pub mod attention;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod layer_probe;
pub mod masking;
pub mod oracle;
pub mod rng;
pub mod selector;

pub use error::{Error, Result};
