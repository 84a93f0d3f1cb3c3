use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::ImageBuffer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Training images plus a held-out evaluation set.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<ImageBuffer>,
    pub eval: Vec<ImageBuffer>,
}

/// Smooth colour texture: a few oriented sinusoids over a gradient, with
/// an occasional hard-edged stripe pattern.
pub fn synthetic_texture(rng: &mut impl Rng, width: usize, height: usize) -> ImageBuffer {
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let angle = rng.gen_range(0.0..PI);
            let freq = rng.gen_range(1.0..6.0) / width.max(height) as f64;
            let phase = rng.gen_range(0.0..2.0 * PI);
            let amp = [rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)];
            (angle, freq, phase, amp)
        })
        .collect();
    let base: [f64; 3] = [rng.gen_range(70.0..180.0), rng.gen_range(70.0..180.0), rng.gen_range(70.0..180.0)];
    let grad: [f64; 2] = [rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)];
    let stripes = rng.gen_bool(0.5).then(|| (rng.gen_range(8.0..20.0), rng.gen_range(-25.0..25.0)));
    ImageBuffer::from_fn(width, height, |x, y, c| {
        let (xf, yf) = (x as f64, y as f64);
        let mut v = base[c] + grad[0] * xf + grad[1] * yf;
        for (angle, freq, phase, amp) in &waves {
            let t = xf * angle.cos() + yf * angle.sin();
            v += amp[c] * (2.0 * PI * freq * t + phase).sin();
        }
        if let Some((period, amp)) = stripes {
            if (xf / period).floor() as i64 % 2 == 0 {
                v += amp;
            }
        }
        v.clamp(0.0, 255.0).round() as u8
    })
}

impl Dataset {
    /// `n` synthetic textures for training and `n_eval` more for evaluation.
    pub fn synthetic(n: usize, n_eval: usize, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = (0..n).map(|_| synthetic_texture(&mut rng, size, size)).collect();
        let eval = (0..n_eval).map(|_| synthetic_texture(&mut rng, size, size)).collect();
        Self { train, eval }
    }

    /// All PPM/PNG files under `dir` (sorted by name); every `holdout_every`-th
    /// image goes to the evaluation set.
    pub fn from_dir(dir: &Path, holdout_every: usize) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ppm" | "png"))
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::InvalidArgument(format!("no .ppm or .png images in {}", dir.display())));
        }
        let (mut train, mut eval) = (Vec::new(), Vec::new());
        for (i, p) in paths.iter().enumerate() {
            let img = ImageBuffer::load(p)?;
            if holdout_every > 1 && paths.len() > 1 && i % holdout_every == holdout_every - 1 {
                eval.push(img);
            } else {
                train.push(img);
            }
        }
        if eval.is_empty() {
            eval.push(train[train.len() - 1].clone());
        }
        Ok(Self { train, eval })
    }

    /// Random `crop × crop` patches with random horizontal flips.
    pub fn batch(&self, rng: &mut impl Rng, size: usize, crop: usize) -> Result<Tensor> {
        if self.train.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        let mut data = Vec::with_capacity(size * 3 * crop * crop);
        for _ in 0..size {
            let img = &self.train[rng.gen_range(0..self.train.len())];
            if img.width() < crop || img.height() < crop {
                return Err(Error::InvalidArgument(format!(
                    "{}x{} image is smaller than the {crop}x{crop} crop",
                    img.width(),
                    img.height()
                )));
            }
            let x0 = rng.gen_range(0..=img.width() - crop);
            let y0 = rng.gen_range(0..=img.height() - crop);
            let mut patch = img.region(x0, y0, crop, crop)?;
            if rng.gen_bool(0.5) {
                patch = patch.flip_horizontal();
            }
            data.extend_from_slice(patch.to_tensor().data());
        }
        Tensor::new(&[size, 3, crop, crop], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        let a = Dataset::synthetic(3, 1, 64, 9);
        let b = Dataset::synthetic(3, 1, 64, 9);
        assert_eq!(a.train, b.train);
        assert_ne!(a.train[0], a.train[1]);
    }

    #[test]
    fn batches_have_the_right_shape() {
        let d = Dataset::synthetic(2, 1, 96, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = d.batch(&mut rng, 3, 64).unwrap();
        assert_eq!(b.shape(), &[3, 3, 64, 64]);
        assert!(d.batch(&mut rng, 1, 128).is_err());
    }
}
