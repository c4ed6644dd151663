//! Few-shot keypoint localization with generative latent graph structure.
//!
//! The pipeline: a per-layer structure VAE encodes support keypoint features
//! into a Gaussian posterior over latent graph codes, decodes sampled codes
//! into soft adjacency matrices, fuses the samples by inverse-variance
//! confidence and the per-layer graphs by query-gated weighting, and uses the
//! fused graph to drive GCN message passing plus sigmoid-space keypoint
//! refinement. A synthetic episodic benchmark with known topology makes every
//! mechanism checkable against oracles.
//!
//! Entry points:
//! - [`episodes::generate_episode`] builds a synthetic few-shot task.
//! - [`model::Model`] holds all parameters and runs the forward pass.
//! - [`train`] / [`eval`] implement the training loop and PCK evaluation.
//! - [`cli::run_cli`] is the command-line front end.

pub mod checkpoint;
pub mod cgt;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod latent;
pub mod matrix;
pub mod model;
pub mod objective;
pub mod rng;
pub mod tape;
pub mod train;

pub use error::Error;
pub use matrix::Matrix;
pub use rng::RngStream;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
