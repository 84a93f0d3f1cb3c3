use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::quality::ms_ssim_var;
use crate::tensor::Float;

/// Distortion term of the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Mse,
    MsSsim,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Mse => "mse",
            Metric::MsSsim => "ms-ssim",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(Metric::Mse),
            "ms-ssim" | "msssim" | "ms_ssim" => Ok(Metric::MsSsim),
            other => Err(Error::InvalidArgument(format!("unknown metric `{other}` (mse or ms-ssim)"))),
        }
    }

    /// Factor applied to [`distortion`] inside the loss: MSE is measured on
    /// the 0..255 scale there.
    pub fn loss_scale(self) -> f64 {
        match self {
            Metric::Mse => 255.0 * 255.0,
            Metric::MsSsim => 1.0,
        }
    }

    /// The λ values used for this metric in published results.
    pub fn lambda_grid(self) -> &'static [f64] {
        match self {
            Metric::Mse => &[0.0035, 0.0067, 0.01, 0.025],
            Metric::MsSsim => &[4.0, 16.0, 40.0, 120.0],
        }
    }
}

/// `MSE(x, x̂)` on the `[0, 1]` scale or `1 − MS-SSIM(x, x̂)`.
pub fn distortion<T: Float>(tape: &mut Tape<'_, T>, x: Var, x_hat: Var, metric: Metric) -> Result<Var> {
    if tape.value(x).shape() != tape.value(x_hat).shape() {
        return Err(Error::Shape(format!(
            "distortion of {:?} against {:?}",
            tape.value(x).shape(),
            tape.value(x_hat).shape()
        )));
    }
    match metric {
        Metric::Mse => {
            let d = tape.sub(x, x_hat)?;
            let sq = tape.mul(d, d)?;
            Ok(tape.mean(sq))
        }
        Metric::MsSsim => {
            let s = ms_ssim_var(tape, x, x_hat)?;
            Ok(tape.affine(s, -T::one(), T::one()))
        }
    }
}

/// `Σ bits / n_pixels + λ·D`, with `D` already on the loss scale.
pub fn rd_loss(latent_bits: &[f64], hyper_bits: &[f64], distortion: f64, lambda: f64, n_pixels: usize) -> Result<f64> {
    if distortion.is_nan() {
        return Err(Error::InvalidArgument("distortion is NaN".into()));
    }
    if n_pixels == 0 {
        return Err(Error::InvalidArgument("pixel count must be positive".into()));
    }
    if latent_bits.iter().chain(hyper_bits).any(|&b| !(b >= 0.0)) {
        return Err(Error::InvalidArgument("rates must be non-negative".into()));
    }
    let bits: f64 = latent_bits.iter().chain(hyper_bits).sum();
    Ok(bits / n_pixels as f64 + lambda * distortion)
}

/// Differentiable form of [`rd_loss`]; returns `(loss, bpp, scaled distortion)`.
pub fn rd_loss_var<T: Float>(
    tape: &mut Tape<'_, T>,
    bits: &[Var],
    distortion: Var,
    metric: Metric,
    lambda: f64,
    n_pixels: usize,
) -> Result<(Var, Var, Var)> {
    let mut total = *bits.first().ok_or_else(|| Error::InvalidArgument("no rate terms".into()))?;
    for &b in &bits[1..] {
        total = tape.add(total, b)?;
    }
    let bpp = tape.affine(total, T::of(1.0 / n_pixels as f64), T::zero());
    let scaled = tape.affine(distortion, T::of(metric.loss_scale()), T::zero());
    let weighted = tape.affine(scaled, T::of(lambda), T::zero());
    Ok((tape.add(bpp, weighted)?, bpp, scaled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn loss_arithmetic() {
        assert_eq!(rd_loss(&[0.0; 3], &[0.0; 3], 0.0, 0.01, 10).unwrap(), 0.0);
        let l = rd_loss(&[60.0, 30.0, 10.0], &[0.0; 3], 50.0, 0.01, 100).unwrap();
        assert!((l - 1.5).abs() < 1e-12);
        assert!(rd_loss(&[1.0], &[], f64::NAN, 0.01, 10).is_err());
        assert!(rd_loss(&[1.0], &[], 0.0, 0.01, 0).is_err());
    }

    #[test]
    fn distortion_trivia() {
        let mut tape = Tape::<f64>::new();
        let zeros = tape.constant(Tensor::zeros(&[1, 3, 16, 16]));
        let ones = tape.constant(Tensor::full(&[1, 3, 16, 16], 1.0));
        let d = distortion(&mut tape, zeros, ones, Metric::Mse).unwrap();
        assert_eq!(tape.value(d).item(), 1.0);
        let d = distortion(&mut tape, ones, ones, Metric::Mse).unwrap();
        assert_eq!(tape.value(d).item(), 0.0);
        let x = tape.constant(Tensor::from_fn(&[1, 3, 16, 16], |i| (i % 7) as f64 / 7.0));
        let d = distortion(&mut tape, x, x, Metric::MsSsim).unwrap();
        assert!(tape.value(d).item().abs() < 1e-12);
        let small = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
        assert!(distortion(&mut tape, x, small, Metric::Mse).is_err());
    }

    #[test]
    fn var_form_matches_scalar() {
        let mut tape = Tape::<f64>::new();
        let bits: Vec<Var> = [60.0, 30.0, 10.0].iter().map(|&b| tape.constant(Tensor::scalar(b))).collect();
        let d = tape.constant(Tensor::scalar(50.0 / (255.0 * 255.0)));
        let (l, bpp, _) = rd_loss_var(&mut tape, &bits, d, Metric::Mse, 0.01, 100).unwrap();
        assert!((tape.value(l).item() - 1.5).abs() < 1e-12);
        assert!((tape.value(bpp).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grids() {
        assert_eq!(Metric::Mse.lambda_grid(), &[0.0035, 0.0067, 0.01, 0.025]);
        assert_eq!(Metric::MsSsim.lambda_grid(), &[4.0, 16.0, 40.0, 120.0]);
        assert_eq!(Metric::parse("MS-SSIM").unwrap(), Metric::MsSsim);
    }
}
