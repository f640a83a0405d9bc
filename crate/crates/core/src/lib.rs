//! Conditional diffusion over irregularly sampled latent trajectories.
//!
//! The crate simulates longitudinal cohorts on a six-visit grid, trains a
//! conditional denoiser with an interpolation/extrapolation curriculum,
//! generates future visits autoregressively with best-of-N plausibility
//! guidance, and evaluates conversion classifiers on the result.

pub mod classify;
pub mod cli;
pub mod cohort;
pub mod config;
pub mod curriculum;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod io;
pub mod numkernel;
pub mod pipeline;
pub mod seed;

pub use error::{Error, Result};
