//! Few-shot class-incremental learning at desk scale: orthogonal
//! pseudo-target generation on the unit hypersphere, the OrCo contrastive
//! loss family with analytic gradients, Hungarian class-to-target
//! assignment, a three-phase training protocol over synthetic or
//! file-provided features, and the full evaluation suite.

pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod rng;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{OrcoError, Result};
