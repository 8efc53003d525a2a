//! Three-branch multimodal classifier with late fusion.
//!
//! An image CNN and two sequence LSTMs are trained independently on their
//! own modality; their per-subject class probabilities are combined by one
//! of four aggregation strategies that degrade confidence explicitly when a
//! modality is missing.

pub mod dataio;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod modalities;
pub mod nn;

pub use error::{Error, LoadError, Result};
