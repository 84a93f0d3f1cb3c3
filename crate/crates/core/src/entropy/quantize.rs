use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// How continuous latents become (pseudo-)integers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive `U(-1/2, 1/2)` noise, used while training.
    Noise,
    /// Round half to even, used for actual coding.
    Round,
}

pub fn round_half_even(v: f32) -> f32 {
    v.round_ties_even()
}

/// Quantises `y`. Noise mode needs `rng`; round mode passes gradients
/// straight through.
pub fn quantize<T: Float, R: Rng>(tape: &mut Tape<'_, T>, y: Var, mode: QuantMode, rng: Option<&mut R>) -> Result<Var> {
    match mode {
        QuantMode::Round => Ok(tape.round_ste(y)),
        QuantMode::Noise => {
            let rng = rng.ok_or_else(|| Error::InvalidArgument("noise quantisation needs a seeded RNG".into()))?;
            let shape = tape.value(y).shape().to_vec();
            let noise = Tensor::from_fn(&shape, |_| T::of(rng.gen_range(-0.5f64..0.5)));
            let noise = tape.constant(noise);
            tape.add(y, noise)
        }
    }
}
