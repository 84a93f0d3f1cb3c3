use crate::autodiff::{Tape, Var};
use crate::codec::ImageBuffer;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
/// Similarity terms are clamped to this before the weighted product.
const CLAMP: f64 = 1e-6;

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Shape(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Mean squared error on the 0..255 scale.
pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB; identical images give `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

/// `−10·log10(1 − score)`; a perfect score gives `f64::INFINITY`.
pub fn msssim_db(score: f64) -> f64 {
    if score >= 1.0 {
        f64::INFINITY
    } else {
        -10.0 * (1.0 - score).log10()
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps() -> Vec<f64> {
    let c = (WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..WINDOW).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Scales usable for an image whose smaller side is `min_side`.
pub fn scales_for(min_side: usize) -> Result<usize> {
    let n = (1..=MS_SSIM_WEIGHTS.len()).rev().find(|&l| min_side >= WINDOW << (l - 1)).unwrap_or(0);
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "MS-SSIM needs images of at least {WINDOW} pixels per side, got {min_side}"
        )));
    }
    Ok(n)
}

/// Weights of the first `n` scales, renormalized to sum to one.
pub fn scale_weights(n: usize) -> Vec<f64> {
    let s: f64 = MS_SSIM_WEIGHTS[..n].iter().sum();
    MS_SSIM_WEIGHTS[..n].iter().map(|w| w / s).collect()
}

/// Mean contrast-structure and full SSIM of `x` against `y` at one scale.
fn ssim_terms<T: Float>(tape: &mut Tape<'_, T>, x: Var, y: Var, taps: &[T]) -> Result<(Var, Var)> {
    let (c1, c2) = (T::of(K1 * K1), T::of(K2 * K2));
    let mu_x = tape.separable_filter(x, taps)?;
    let mu_y = tape.separable_filter(y, taps)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let e_xx = tape.separable_filter(xx, taps)?;
    let e_yy = tape.separable_filter(yy, taps)?;
    let e_xy = tape.separable_filter(xy, taps)?;
    let mu_xx = tape.mul(mu_x, mu_x)?;
    let mu_yy = tape.mul(mu_y, mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(e_xx, mu_xx)?;
    let var_y = tape.sub(e_yy, mu_yy)?;
    let cov = tape.sub(e_xy, mu_xy)?;

    let cs_num = tape.affine(cov, T::of(2.0), c2);
    let var_sum = tape.add(var_x, var_y)?;
    let cs_den = tape.affine(var_sum, T::one(), c2);
    let cs_map = tape.div(cs_num, cs_den)?;

    let l_num = tape.affine(mu_xy, T::of(2.0), c1);
    let mu_sum = tape.add(mu_xx, mu_yy)?;
    let l_den = tape.affine(mu_sum, T::one(), c1);
    let l_map = tape.div(l_num, l_den)?;
    let ssim_map = tape.mul(l_map, cs_map)?;
    Ok((tape.mean(cs_map), tape.mean(ssim_map)))
}

/// Differentiable MS-SSIM of two `[N, C, H, W]` batches with values in `[0, 1]`.
/// Statistics are averaged over the whole batch at each scale.
pub fn ms_ssim_var<T: Float>(tape: &mut Tape<'_, T>, x: Var, y: Var) -> Result<Var> {
    let sx = tape.value(x).shape().to_vec();
    if sx != tape.value(y).shape() {
        return Err(Error::Shape(format!("MS-SSIM inputs {:?} vs {:?}", sx, tape.value(y).shape())));
    }
    if sx.len() != 4 {
        return Err(Error::Shape(format!("MS-SSIM expects [N, C, H, W], got {sx:?}")));
    }
    let levels = scales_for(sx[2].min(sx[3]))?;
    let weights = scale_weights(levels);
    let taps: Vec<T> = gaussian_taps().into_iter().map(T::of).collect();
    let (mut a, mut b) = (x, y);
    let mut acc: Option<Var> = None;
    for (i, &w) in weights.iter().enumerate() {
        let (cs, ssim) = ssim_terms(tape, a, b, &taps)?;
        let term = if i + 1 == levels { ssim } else { cs };
        let clamped = tape.clamp_min(term, T::of(CLAMP));
        let powered = tape.powf(clamped, T::of(w));
        acc = Some(match acc {
            None => powered,
            Some(p) => tape.mul(p, powered)?,
        });
        if i + 1 < levels {
            a = tape.avg_pool2x(a)?;
            b = tape.avg_pool2x(b)?;
        }
    }
    Ok(acc.expect("at least one scale"))
}

/// MS-SSIM of two 8-bit images in double precision.
pub fn ms_ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims(a, b)?;
    ms_ssim_tensors(&a.to_tensor().cast::<f64>(), &b.to_tensor().cast::<f64>())
}

pub fn ms_ssim_tensors(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(a.clone());
    let y = tape.constant(b.clone());
    let s = ms_ssim_var(&mut tape, x, y)?;
    Ok(tape.value(s).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: usize, h: usize, f: impl Fn(usize, usize, usize) -> u8) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, f)
    }

    #[test]
    fn psnr_closed_forms() {
        let a = img(8, 8, |_, _, _| 0);
        let b = img(8, 8, |_, _, _| 255);
        let c = img(8, 8, |_, _, _| 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &b).unwrap().abs() < 1e-12);
        assert!((psnr(&a, &c).unwrap() - 48.1308).abs() < 1e-4);
        assert!(psnr(&a, &img(4, 8, |_, _, _| 0)).is_err());
    }

    #[test]
    fn db_conversion() {
        assert_eq!(msssim_db(1.0), f64::INFINITY);
        assert!((msssim_db(0.9) - 10.0).abs() < 1e-9);
        assert!((msssim_db(0.99) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn scale_selection() {
        assert_eq!(scales_for(176).unwrap(), 5);
        assert_eq!(scales_for(175).unwrap(), 4);
        assert_eq!(scales_for(64).unwrap(), 3);
        assert_eq!(scales_for(11).unwrap(), 1);
        assert!(scales_for(10).is_err());
        let w = scale_weights(3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((gaussian_taps().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ms_ssim_identity_and_symmetry() {
        let a = img(48, 40, |x, y, c| ((x * 7 + y * 3 + c * 50) % 256) as u8);
        let b = img(48, 40, |x, y, c| ((x * 5 + y * 11 + c * 20) % 256) as u8);
        assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let (ab, ba) = (ms_ssim(&a, &b).unwrap(), ms_ssim(&b, &a).unwrap());
        assert!(ab < 0.99 && ab > 0.0);
        assert!((ab - ba).abs() < 1e-12);
        assert!(ms_ssim(&img(8, 8, |_, _, _| 0), &img(8, 8, |_, _, _| 0)).is_err());
    }

    /// Direct single-scale SSIM on one gray plane, window fully inside.
    #[test]
    fn single_scale_matches_direct_sum() {
        let a = img(11, 11, |x, y, _| ((x * 23 + y * 7) % 256) as u8);
        let b = img(11, 11, |x, y, _| ((x * 13 + y * 19 + 5) % 256) as u8);
        let g = gaussian_taps();
        let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for y in 0..11 {
            for x in 0..11 {
                let w = g[x] * g[y];
                let (p, q) = ((a.pixel(x, y, 0) as f32 / 255.0) as f64, (b.pixel(x, y, 0) as f32 / 255.0) as f64);
                mx += w * p;
                my += w * q;
                xx += w * p * p;
                yy += w * q * q;
                xy += w * p * q;
            }
        }
        let (vx, vy, cv) = (xx - mx * mx, yy - my * my, xy - mx * my);
        let (c1, c2) = (K1 * K1, K2 * K2);
        let want = ((2.0 * mx * my + c1) * (2.0 * cv + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        let got = ms_ssim(&a, &b).unwrap();
        assert!((got - want.max(CLAMP)).abs() < 1e-10, "{got} vs {want}");
    }
}
