//! Knowledge refactoring for conditional rectified-flow models on synthetic
//! 2D Gaussian-mixture worlds.
//!
//! The library is organized around the pipeline stages: `corpus` builds
//! synthetic worlds with analytic target distributions, `flowcore` is the
//! velocity network and sampler, `dkdm` performs distribution-matching
//! refactoring with consolidation and a timestep curriculum, `norl` corrects
//! residual failures with a negative-only preference objective, `trainer`
//! ties the loops together, and `evalsuite` scores the results against the
//! analytic oracles.

pub mod analytic;
pub mod config;
pub mod corpus;
pub mod dkdm;
pub mod error;
pub mod evalsuite;
pub mod flowcore;
pub mod norl;
pub mod trainer;
pub mod worldfile;

pub use error::{Error, Result};
