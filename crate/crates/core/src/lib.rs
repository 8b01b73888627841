//! Entropy-guided visual-layer fusion with contrastive decoding over recorded
//! per-layer next-token distributions.

pub mod analysis;
pub mod answer;
pub mod contrast;
pub mod decode;
pub mod dist;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
