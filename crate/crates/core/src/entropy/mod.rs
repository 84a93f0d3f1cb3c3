//! Quantisation, likelihood models and rate estimation.

pub mod cdf;
pub mod factorized;
pub mod gaussian;
mod quantize;
mod rate;

pub use cdf::CdfTable;
pub use factorized::FactorizedDensity;
pub use gaussian::{GaussianConditional, LIKELIHOOD_FLOOR};
pub use quantize::{quantize, round_half_even, QuantMode};
pub use rate::estimate_rate;
