//! Accident-anticipation head over per-frame video features.
//!
//! A sliding-window transformer encoder summarizes the most recent frames,
//! a graph transformer fuses context over a causal frame graph, and a small
//! classifier scores each frame with an accident probability. The crate also
//! carries the training loop, the AP / TTA / mTTA evaluation harness, the
//! on-disk feature and checkpoint formats, and a synthetic data generator.

pub mod dataio;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
