//! Cross-domain few-shot segmentation on procedurally generated episodes.
//!
//! The network decomposes backbone features into a domain-oriented shared
//! stream and a category-oriented private stream, fuses them under a
//! spatially varying softmax weighting, and—during target-domain
//! fine-tuning—modulates the private stream with affine parameters derived
//! from the shared one. Everything runs on a deterministic f64 tape-autodiff
//! engine, so training, evaluation and the numerical self-checks are exactly
//! reproducible on any machine.

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decomp;
pub mod error;
pub mod fusion;
pub mod head;
pub mod metrics;
pub mod model;
pub mod modulation;
pub mod nn;
pub mod opt;
pub mod params;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
