//! Audio-visual facial action unit detection.
//!
//! Log-Mel audio and per-frame visual embeddings are aligned, fused at
//! several temporal scales with windowed attention, and classified per frame
//! by a dilated causal TCN with an MLP head.

pub mod audio;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod init;
pub mod layers;
pub mod model;
pub mod temporal;
pub mod views;
pub mod visual;

pub use error::{Error, Result};
