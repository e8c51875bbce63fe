//! Training objectives for learning from noisy multi-label data, dynamic
//! intensity windowing, evaluation statistics and a synthetic benchmark
//! with known ground truth.

pub mod error;
pub mod experiment;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod normalization;
pub mod synth;
pub mod textfmt;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
