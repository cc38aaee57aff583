//! Residual-stream normalisation topologies for Transformers.
//!
//! The crate wires one shared set of attention / SwiGLU blocks into seven
//! residual topologies (Pre-Norm, Post-Norm, DeepNorm, ResiDual, HybridNorm
//! and the two-stream SiameseNorm in canonical and practical form), runs them
//! on a small reverse-mode tape in `f64`, and ships the tooling to check them:
//! finite-difference gradient checks, assembled-vs-brute-force block
//! Jacobians, magnitude / gradient-norm / stream-ratio profiles, a logit
//! lens, and a desk-scale AdamW training harness with divergence and spike
//! detection.

pub mod analysis;
pub mod blocks;
pub mod config;
pub mod error;
pub mod experiment;
pub mod params;
pub mod parallel;
pub mod tensor;
pub mod topology;
pub mod training;

pub use config::{ModelConfig, TopologyKind};
pub use error::{Error, Result};
pub use params::{Parameter, ParamSet};
pub use tensor::{NodeId, Tape, Tensor};
