//! Learned image codec built on a frequency-oriented pyramid transform.
//!
//! The analysis side splits an image into three frequency bands, each with
//! its own hyperprior entropy model; a range-ANS coder writes one substream
//! per band, and the decoder reconstructs any subset of bands and sums them.

pub mod autodiff;
pub mod codec;
pub mod config;
pub mod entropy;
pub mod error;
pub mod metrics;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod rans;
pub mod split;
pub mod tensor;
pub mod training;
pub mod transform;

pub use error::{Error, Result};
