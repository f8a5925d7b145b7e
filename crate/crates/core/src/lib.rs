//! Minimal-evidence explanations for frozen image classifiers.
//!
//! A small U-Net is optimized per image so that the masked image `m ⊙ x`
//! reproduces the classifier's activations and decision while the mask stays
//! sparse, binary, smooth and robust to randomized backgrounds.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod gradcheck;
pub mod selftest;
pub mod synth;
pub mod classifier;
pub mod explainer;
pub mod metrics;
pub mod gradcam;
pub mod evaluate;
