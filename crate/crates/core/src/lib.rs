//! Weak-to-strong semantics compensation for mean-teacher detector
//! adaptation, exercised on synthetic detection scenarios.

pub mod audit;
pub mod calibration;
pub mod contrastive;
pub mod error;
pub mod geometry;
pub mod labeling;
pub mod manifest;
pub mod mt;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
