//! Learned set clustering.
//!
//! A recurrent network reads a set of `n` points and emits a distribution over the
//! number of clusters together with, for every candidate cluster count, per-point
//! assignment distributions. Training only needs pairwise same/different labels, so
//! a trained model can partition groups it has never seen.
//!
//! Module map:
//! - [`data`]: episodic synthetic 2D generators, pairwise labels, mini-batches.
//! - [`model`]: embedding hook, projection, residual bidirectional LSTM trunk, heads.
//! - [`metric`]: optional quadratic-form distance block with PSD projection.
//! - [`loss`]: pairwise co-membership probabilities and the weighted objective.
//! - [`eval`]: MR / NMI, partition decoding, episodic evaluation, classical baselines.
//! - [`train`]: Adadelta training loop, checkpoints, gradient verification.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod metric;
pub mod model;
pub mod real;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
