//! Two-branch speech/noise enhancement network with interaction between the
//! branches, a time-domain merge stage, and the tooling around it: a small
//! reverse-mode tensor engine, STFT analysis/synthesis, synthetic datasets,
//! training loops, and objective metrics.

pub mod data;
pub mod dsp;
pub mod error;
pub mod infer;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
