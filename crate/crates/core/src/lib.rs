//! Critical example mining for vehicle trajectory datasets.
//!
//! The crate estimates how rare an observation window (`X`, the 3 s history)
//! and a full driving course (`Z`, history plus 5 s future) are, using a pair
//! of NICE-style normalizing flows trained on hand-crafted scene features.
//! Low log-densities mark rare examples; the hardness score
//! `C_z - lambda * C_x` marks examples whose history looks ordinary but whose
//! continuation does not.
//!
//! Module map:
//!
//! - [`data`]: trajectory records, NGSIM-style CSV ingest, example windowing.
//! - [`synth`]: synthetic highway scenarios with labelled rare maneuvers.
//! - [`features`]: scene factors, window partitioning, the 26-per-segment
//!   feature block and standardization.
//! - [`flow`]: additive-coupling flow with exact log-density and sampling.
//! - [`train`]: maximum-likelihood training with a hand-written reverse pass
//!   and a finite-difference gradient check.
//! - [`mining`]: rareness/hardness scores and percentile subsets.
//! - [`eval`]: constant-velocity Kalman baseline and subset metrics.
//! - [`pipeline`]: on-disk staged pipeline behind the `trajmine` binary.

pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod flow;
pub mod io;
pub mod mining;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

/// Sampling rate of every track, in Hz.
pub const FRAME_RATE_HZ: f64 = 10.0;
/// Frame period in seconds.
pub const FRAME_DT: f64 = 0.1;
/// Frames in the observation window (3 s).
pub const HISTORY_FRAMES: usize = 30;
/// Frames in the prediction horizon (5 s).
pub const FUTURE_FRAMES: usize = 50;
/// Frames in the full course window (8 s).
pub const COURSE_FRAMES: usize = HISTORY_FRAMES + FUTURE_FRAMES;
