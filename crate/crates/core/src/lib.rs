//! Iterative pseudo-labeling for partially labeled lesion detection datasets.
//!
//! The crate is detector-agnostic: a detector is either an external process
//! speaking a small file protocol, or the built-in seeded synthetic detector
//! that emits noisy detections around a known hidden ground truth.

pub mod anchorlab;
pub mod annotations;
pub mod cli;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod orchestrator;
pub mod par;
pub mod report;
pub mod scenario;
pub mod selection;

pub use error::{Error, Result};
