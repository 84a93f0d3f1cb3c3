//! Zero-mean Gaussian conditional model for the main latents.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Float;

/// Smallest admissible scale.
pub const SCALE_LOWER_BOUND: f64 = 0.11;
/// Largest tabulated scale.
pub const SCALE_UPPER_BOUND: f64 = 256.0;
/// Number of log-spaced entries in the scale table.
pub const SCALE_TABLE_LEN: usize = 64;
/// Floor applied to every likelihood before taking logs.
pub const LIKELIHOOD_FLOOR: f64 = 1.0 / (1u64 << 24) as f64;

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Probability mass of the integer bin around `value` under `N(0, scale²)`.
///
/// Evaluated on the negative half-axis, where the normal CDF keeps its
/// relative precision.
pub fn bin_mass(value: f64, scale: f64) -> f64 {
    let v = value.abs();
    std_normal_cdf((0.5 - v) / scale) - std_normal_cdf((-0.5 - v) / scale)
}

/// `(p, dp/dvalue, dp/dscale)` for the unfloored bin mass.
pub(crate) fn bin_mass_with_grads(value: f64, scale: f64) -> (f64, f64, f64) {
    let upper = (value + 0.5) / scale;
    let lower = (value - 0.5) / scale;
    let (pu, pl) = (std_normal_pdf(upper), std_normal_pdf(lower));
    let dvalue = (pu - pl) / scale;
    let dscale = -(pu * upper - pl * lower) / scale;
    (bin_mass(value, scale), dvalue, dscale)
}

/// Scale lower bound and the quantisation table of scales used for coding.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianConditional {
    lower_bound: f64,
    scale_table: Vec<f64>,
}

impl Default for GaussianConditional {
    fn default() -> Self {
        Self::new(SCALE_LOWER_BOUND, SCALE_UPPER_BOUND, SCALE_TABLE_LEN)
    }
}

impl GaussianConditional {
    /// Log-spaced table of `len` scales from `lower_bound` to `upper`.
    pub fn new(lower_bound: f64, upper: f64, len: usize) -> Self {
        assert!(lower_bound > 0.0 && upper > lower_bound && len >= 2);
        let (lo, hi) = (lower_bound.ln(), upper.ln());
        let scale_table = (0..len)
            .map(|i| (lo + (hi - lo) * i as f64 / (len - 1) as f64).exp())
            .collect();
        Self { lower_bound, scale_table }
    }

    pub fn lower_bound(&self) -> f64 {
        self.lower_bound
    }

    pub fn scale_table(&self) -> &[f64] {
        &self.scale_table
    }

    /// Index of the smallest tabulated scale that is not below `scale`
    /// (saturating at the last entry).
    pub fn scale_index(&self, scale: f64) -> usize {
        self.scale_table
            .iter()
            .position(|&s| s >= scale)
            .unwrap_or(self.scale_table.len() - 1)
    }

    /// Bin likelihoods of `values` under zero-mean Gaussians of scale `sigma`.
    ///
    /// Returns the likelihood node and the number of scales that had to be
    /// raised to the lower bound.
    pub fn likelihood<T: Float>(&self, tape: &mut Tape<'_, T>, values: Var, sigma: Var) -> Result<(Var, usize)> {
        let bound = T::of(self.lower_bound);
        let clamped = tape.value(sigma).data().iter().filter(|&&s| s < bound).count();
        let p = tape.gaussian_likelihood(values, sigma, self.lower_bound)?;
        Ok((p, clamped))
    }
}

/// Direct (tape-free) bin likelihood with scale clamping and the likelihood floor.
pub fn gaussian_likelihood(value: f64, sigma: f64) -> Result<f64> {
    if sigma.is_nan() || value.is_nan() {
        return Err(Error::InvalidArgument("NaN passed to gaussian_likelihood".into()));
    }
    Ok(bin_mass(value, sigma.max(SCALE_LOWER_BOUND)).max(LIKELIHOOD_FLOOR))
}
