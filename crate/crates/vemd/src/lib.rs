//! Group emotion recognition from whole-scene video with multi-task
//! structural supervision, at desk scale.
//!
//! The crate implements a two-branch variational encoder regularized toward a
//! Gaussian latent with an MMD penalty, two structural decoders (a query-based
//! set predictor for per-person limb sets and a dense limb-heatmap decoder),
//! an attention-pooled emotion classifier, audio/text late fusion, and a
//! config-driven experiment harness with a deterministic synthetic-scene
//! generator so everything trains and evaluates in minutes on a CPU.

pub mod error;
pub mod graph;
pub mod nn;

pub use error::{Result, VemdError};
