//! Counterfactual explanations for image classifiers.
//!
//! An explanation is produced in two stages. An adversarial attack is
//! optimised through a diffusion filter (noise to a shallow level, denoise
//! back), which keeps the perturbation on the image manifold and yields a
//! *pre-explanation*. The difference between the input and the
//! pre-explanation then defines a mask, and a masked diffusion refinement
//! rewrites only the masked region, leaving every other pixel untouched.
//!
//! The crate also holds the desk-scale models and datasets used to exercise
//! the pipeline, and the evaluation metrics.

pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod engine;
mod error;
pub mod image;
pub mod metrics;
pub mod noise;
mod nn;
pub mod zoo;

pub use error::{Error, Result};
