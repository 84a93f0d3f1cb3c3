//! Analysis side: spatial sampling, pyramid decomposition, unification and
//! hyper-encoding.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Activation, Conv2d, ParamStore};
use crate::split::{PerSplit, Split};
use crate::tensor::{Float, Tensor};

/// Kernel taps `(ky, kx)` that make a 3×3 stride-2 pad-1 conv an exact 2×2 average.
const AVG_TAPS: [(usize, usize); 4] = [(1, 1), (1, 2), (2, 1), (2, 2)];

fn averaging_kernel(out_c: usize, in_c: usize, mix_channels: bool) -> Tensor {
    let mut w = Tensor::zeros(&[out_c, in_c, 3, 3]);
    let weight = if mix_channels { 0.25 / in_c as f32 } else { 0.25 };
    for o in 0..out_c {
        for i in 0..in_c {
            if !mix_channels && i != o {
                continue;
            }
            for (ky, kx) in AVG_TAPS {
                w.data_mut()[((o * in_c + i) * 3 + ky) * 3 + kx] = weight;
            }
        }
    }
    w
}

fn identity_kernel(c: usize) -> Tensor {
    Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 })
}

fn fix(store: &mut ParamStore, conv: &Conv2d, weight: Tensor) -> Result<()> {
    store.set(conv.weight, weight)?;
    store.set(conv.bias, Tensor::zeros(&[conv.out_channels]))
}

/// Result of [`AnalysisTransform::decompose`].
pub struct Pyramid {
    /// Pre-unification bands.
    pub bands: PerSplit<Var>,
    /// `C(I)`, the full-resolution feature the low band is taken from.
    pub same: Var,
    /// `C↓2(I)`, shared by the mid and high bands.
    pub down: Var,
}

#[derive(Clone, Debug)]
pub struct AnalysisTransform {
    spatial: [Conv2d; 2],
    same: Conv2d,
    down: [Conv2d; 2],
    unify: Option<PerSplit<[Conv2d; 2]>>,
    activation: Activation,
}

impl AnalysisTransform {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.base_channels;
        let spatial = [
            Conv2d::new(store, "analysis.spatial0", 3, b, 3, 2, rng)?,
            Conv2d::new(store, "analysis.spatial1", b, b, 3, 2, rng)?,
        ];
        let same = Conv2d::new(store, "analysis.same", b, b, if cfg.linear { 1 } else { 3 }, 1, rng)?;
        let down = [
            Conv2d::new(store, "analysis.down0", b, b, 3, 2, rng)?,
            Conv2d::new(store, "analysis.down1", b, b, 3, 2, rng)?,
        ];
        if cfg.linear {
            fix(store, &spatial[0], averaging_kernel(b, 3, true))?;
            fix(store, &spatial[1], averaging_kernel(b, b, false))?;
            fix(store, &same, identity_kernel(b))?;
            for d in &down {
                fix(store, d, averaging_kernel(b, b, false))?;
            }
            return Ok(Self { spatial, same, down, unify: None, activation: Activation::Identity });
        }
        let m = cfg.latent_channels;
        let unify = PerSplit::try_from_fn(|s| -> Result<[Conv2d; 2]> {
            Ok([
                Conv2d::new(store, &format!("analysis.unify.{s}.0"), b, m, 3, 1, rng)?,
                Conv2d::new(store, &format!("analysis.unify.{s}.1"), m, m, 3, 1, rng)?,
            ])
        })?;
        Ok(Self { spatial, same, down, unify: Some(unify), activation: cfg.activation })
    }

    /// `X [N,3,m,n] → I [N,B,m/4,n/4]`.
    pub fn spatial_sample<T: Float>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let [_, c, h, w] = tape.value(x).dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected a 3-channel image, got {c} channels")));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!(
                "image {w}x{h} must have sides divisible by 4; pad to {}x{}",
                w.div_ceil(4) * 4,
                h.div_ceil(4) * 4
            )));
        }
        let a = self.spatial[0].forward(tape, x)?;
        let a = self.activation.apply(tape, a);
        self.spatial[1].forward(tape, a)
    }

    /// Three-band pyramid of `I`: `high = C↓2(C↓2(I))`, `mid = C↓2(I) − u(high)`,
    /// `low = C(I) − u(mid)`.
    pub fn decompose<T: Float>(&self, tape: &mut Tape<'_, T>, i: Var) -> Result<Pyramid> {
        let [_, _, h, w] = tape.value(i).dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!("feature {w}x{h} must have sides divisible by 4")));
        }
        let down = self.down[0].forward(tape, i)?;
        let high = self.down[1].forward(tape, down)?;
        let up_high = tape.upsample2x(high)?;
        let mid = tape.sub(down, up_high)?;
        let same = self.same.forward(tape, i)?;
        let up_mid = tape.upsample2x(mid)?;
        let low = tape.sub(same, up_mid)?;
        Ok(Pyramid { bands: PerSplit([high, mid, low]), same, down })
    }

    /// Maps each band to its latent `y_k`; the identity in linear mode.
    pub fn unify<T: Float>(&self, tape: &mut Tape<'_, T>, bands: &PerSplit<Var>) -> Result<PerSplit<Var>> {
        let Some(unify) = &self.unify else {
            return Ok(bands.clone());
        };
        PerSplit::try_from_fn(|s| {
            let [c0, c1] = &unify[s];
            let a = c0.forward(tape, bands[s])?;
            let a = self.activation.apply(tape, a);
            c1.forward(tape, a)
        })
    }

    /// `X → {y_high, y_mid, y_low}`.
    pub fn analyze<T: Float>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<PerSplit<Var>> {
        let i = self.spatial_sample(tape, x)?;
        let p = self.decompose(tape, i)?;
        self.unify(tape, &p.bands)
    }
}

/// Hyper-encoder `|y| → conv3 s1 → conv5 s2 → conv5 s2`.
#[derive(Clone, Debug)]
pub struct HyperEncoder {
    convs: [Conv2d; 3],
    activation: Activation,
}

impl HyperEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let (m, h) = (cfg.latent_channels, cfg.hyper_channels);
        Ok(Self {
            convs: [
                Conv2d::new(store, &format!("{name}.0"), m, h, 3, 1, rng)?,
                Conv2d::new(store, &format!("{name}.1"), h, h, 5, 2, rng)?,
                Conv2d::new(store, &format!("{name}.2"), h, h, 5, 2, rng)?,
            ],
            activation: if cfg.linear { Activation::Relu } else { cfg.activation },
        })
    }

    pub fn convs(&self) -> &[Conv2d; 3] {
        &self.convs
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, y: Var) -> Result<Var> {
        let mut a = tape.abs(y);
        for (n, conv) in self.convs.iter().enumerate() {
            a = conv.forward(tape, a)?;
            if n + 1 < self.convs.len() {
                a = self.activation.apply(tape, a);
            }
        }
        Ok(a)
    }
}

/// Hyper-encoders for every split.
pub fn hyper_encoders(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<PerSplit<HyperEncoder>> {
    PerSplit::try_from_fn(|s: Split| HyperEncoder::new(store, &format!("hyper_enc.{s}"), cfg, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &ModelConfig) -> (ParamStore, AnalysisTransform) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = AnalysisTransform::new(&mut store, cfg, &mut rng).unwrap();
        (store, t)
    }

    #[test]
    fn shapes() {
        let cfg = ModelConfig { base_channels: 8, latent_channels: 6, hyper_channels: 4, ..ModelConfig::desk() };
        let (store, t) = build(&cfg);
        let mut tape = Tape::inference(&store);
        let x = tape.constant(Tensor::full(&[1, 3, 64, 64], 0.5));
        let i = t.spatial_sample(&mut tape, x).unwrap();
        assert_eq!(tape.value(i).shape(), &[1, 8, 16, 16]);
        let p = t.decompose(&mut tape, i).unwrap();
        assert_eq!(tape.value(p.bands[Split::High]).shape(), &[1, 8, 4, 4]);
        assert_eq!(tape.value(p.bands[Split::Mid]).shape(), &[1, 8, 8, 8]);
        assert_eq!(tape.value(p.bands[Split::Low]).shape(), &[1, 8, 16, 16]);
        let y = t.unify(&mut tape, &p.bands).unwrap();
        assert_eq!(tape.value(y[Split::Low]).shape(), &[1, 6, 16, 16]);
        let bad = tape.constant(Tensor::zeros(&[1, 3, 66, 64]));
        let err = t.spatial_sample(&mut tape, bad).unwrap_err().to_string();
        assert!(err.contains("68"), "{err}");
    }

    #[test]
    fn linear_mode_keeps_constants() {
        let (store, t) = build(&ModelConfig::linear(4));
        let mut tape = Tape::inference(&store);
        let x = tape.constant(Tensor::full(&[1, 3, 64, 64], 0.3));
        let i = t.spatial_sample(&mut tape, x).unwrap();
        assert!(tape.value(i).data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn zero_hyper_encoder_gives_zeros() {
        let cfg = ModelConfig { base_channels: 8, latent_channels: 6, hyper_channels: 4, ..ModelConfig::desk() };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let he = HyperEncoder::new(&mut store, "he", &cfg, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut tape = Tape::inference(&store);
        let y = tape.constant(Tensor::full(&[1, 6, 16, 16], 2.0));
        let z = he.forward(&mut tape, y).unwrap();
        assert_eq!(tape.value(z).shape(), &[1, 4, 4, 4]);
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }
}
