//! Meta-learned viewport prediction for 360-degree video streaming.
//!
//! The library is organized around the streaming pipeline:
//!
//! - [`geometry`]: unit-sphere primitives (directions, quaternions, spherical
//!   caps and their intersection areas),
//! - [`trace`]: head-tracking trace ingestion, resampling and synthesis,
//! - [`seqmodel`]: sequence regressors (LSTM and a linear baseline) with
//!   exact gradients and plain SGD,
//! - [`metalearn`]: Reptile meta-training and online per-user adaptation,
//! - [`sim`]: the discrete-time streaming simulator (predict direction,
//!   decide prefetch angle, account overlap and bandwidth),
//! - [`metrics`]: MAE / MSPR / IWP aggregation, reference baselines and
//!   FLOPs / battery estimates.

pub mod geometry;
pub mod metalearn;
pub mod metrics;
pub mod seqmodel;
pub mod sim;
pub mod trace;

mod rngutil;

pub use rngutil::derive_seed;
