//! Tile-level camera soiling toolkit.
//!
//! - [`geometry`]: polygon annotations to per-pixel class maps.
//! - [`coverage`]: per-tile class coverage and dominant-class labels.
//! - [`metrics`]: coverage RMSE, confusion matrices, weighted precision.
//! - [`dataset`]: frame subsampling, stratified splits, synthetic scenes.
//! - [`trainer`]: a small convolutional encoder with a coverage decoder,
//!   trained in two phases with the encoder frozen in the second.
//! - [`cli`]: the `tilecov` command implementations.

pub mod cli;
pub mod coverage;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod trainer;

pub use error::{Error, Result};
