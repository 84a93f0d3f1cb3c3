//! Synthesis side: hyper-decoders, per-split reconstruction branches and
//! additive fusion.

mod attention;

pub use attention::{attention_cost, CrissCrossAttention};

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::entropy::gaussian::SCALE_LOWER_BOUND;
use crate::error::{Error, Result};
use crate::nn::{Activation, Conv2d, ConvTranspose2d, ParamStore};
use crate::split::{PerSplit, Split, SplitMask};
use crate::tensor::Float;

/// `ẑ → σ`: two ×2 transposed convs, a 3×3 conv, `exp`, then the scale bound.
#[derive(Clone, Debug)]
pub struct HyperDecoder {
    pub up: [ConvTranspose2d; 2],
    pub out: Conv2d,
    activation: Activation,
}

impl HyperDecoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let (m, h) = (cfg.latent_channels, cfg.hyper_channels);
        let up = [
            ConvTranspose2d::new(store, &format!("{name}.0"), h, h, 5, 2, rng)?,
            ConvTranspose2d::new(store, &format!("{name}.1"), h, h, 5, 2, rng)?,
        ];
        let out = Conv2d::new(store, &format!("{name}.2"), h, m, 3, 1, rng)?;
        // Start with scales near one rather than exp of a unit-variance signal.
        store.scale(out.weight, 0.1);
        Ok(Self {
            up,
            out,
            activation: if cfg.linear { Activation::Relu } else { cfg.activation },
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, z_hat: Var) -> Result<Var> {
        let a = self.up[0].forward(tape, z_hat)?;
        let a = self.activation.apply(tape, a);
        let a = self.up[1].forward(tape, a)?;
        let a = self.activation.apply(tape, a);
        let a = self.out.forward(tape, a)?;
        let s = tape.exp(a);
        Ok(tape.lower_bound(s, T::of(SCALE_LOWER_BOUND)))
    }
}

/// Reconstruction branch `R_k`: a chain of ×2 transposed convs ending in
/// three channels, with one attention block after the first layer.
#[derive(Clone, Debug)]
pub struct Branch {
    pub layers: Vec<ConvTranspose2d>,
    pub attention: CrissCrossAttention,
    activation: Activation,
}

impl Branch {
    pub fn new(store: &mut ParamStore, split: Split, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let depth = Self::depth(split);
        let (m, b) = (cfg.latent_channels, cfg.base_channels);
        let mut layers = Vec::with_capacity(depth);
        for n in 0..depth {
            let cin = if n == 0 { m } else { b };
            let cout = if n + 1 == depth { 3 } else { b };
            layers.push(ConvTranspose2d::new(store, &format!("synthesis.{split}.{n}"), cin, cout, 5, 2, rng)?);
        }
        store.scale(layers[depth - 1].weight, 0.1);
        let attention = CrissCrossAttention::new(store, &format!("synthesis.{split}.attention"), b, cfg.attention_reduction, rng)?;
        let activation = if cfg.linear { Activation::Relu } else { cfg.activation };
        Ok(Self { layers, attention, activation })
    }

    /// Number of ×2 layers: 4× for low, 8× for mid, 16× for high.
    pub fn depth(split: Split) -> usize {
        match split {
            Split::Low => 2,
            Split::Mid => 3,
            Split::High => 4,
        }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, y_hat: Var) -> Result<Var> {
        let mut a = y_hat;
        for (n, layer) in self.layers.iter().enumerate() {
            a = layer.forward(tape, a)?;
            if n + 1 < self.layers.len() {
                a = self.activation.apply(tape, a);
            }
            if n == 0 {
                a = self.attention.forward(tape, a)?;
            }
        }
        Ok(a)
    }
}

#[derive(Clone, Debug)]
pub struct Synthesis {
    pub branches: PerSplit<Branch>,
}

impl Synthesis {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self { branches: PerSplit::try_from_fn(|s| Branch::new(store, s, cfg, rng))? })
    }

    /// Sum of `R_k(ŷ_k)` over the enabled splits.
    pub fn reconstruct<T: Float>(&self, tape: &mut Tape<'_, T>, y_hat: &PerSplit<Option<Var>>, mask: SplitMask) -> Result<Var> {
        let mut total: Option<Var> = None;
        for s in mask.splits() {
            let y = y_hat[s].ok_or_else(|| Error::InvalidArgument(format!("split `{s}` requested but not provided")))?;
            let part = self.branches[s].forward(tape, y)?;
            total = Some(match total {
                Some(t) => tape.add(t, part)?,
                None => part,
            });
        }
        Ok(total.expect("mask is never empty"))
    }
}
