//! Self-supervised motion magnification.
//!
//! Trains an image-pair generator whose optical flow, as measured by a
//! differentiable motion estimator inside the loss, is scaled by a target
//! factor α. Ships classical forward-warp baselines, a synthetic benchmark
//! generator with exact ground-truth flow, a frame-pair curation filter,
//! and a metric/evaluation harness.

pub mod error;
pub mod io;
pub mod tensor;
pub mod types;

pub use error::{Error, Result};
