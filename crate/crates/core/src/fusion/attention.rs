use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::tensor::Float;

/// Criss-cross attention block with a plain residual:
/// `f + aggregate(softmax(q·k over row and column), v)`.
#[derive(Clone, Debug)]
pub struct CrissCrossAttention {
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub reduction: usize,
}

impl CrissCrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::InvalidArgument(format!(
                "reduction {reduction} does not divide {channels} channels"
            )));
        }
        let inner = channels / reduction;
        let query = Conv2d::new(store, &format!("{name}.query"), channels, inner, 1, 1, rng)?;
        let key = Conv2d::new(store, &format!("{name}.key"), channels, inner, 1, 1, rng)?;
        let value = Conv2d::new(store, &format!("{name}.value"), channels, channels, 1, 1, rng)?;
        // Near-identity at initialization.
        store.scale(value.weight, 0.1);
        Ok(Self { query, key, value, reduction })
    }

    pub fn channels(&self) -> usize {
        self.value.in_channels
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, f: Var) -> Result<Var> {
        let c = tape.value(f).dims4()?[1];
        if c != self.channels() {
            return Err(Error::Shape(format!("attention expects {} channels, got {c}", self.channels())));
        }
        let q = self.query.forward(tape, f)?;
        let k = self.key.forward(tape, f)?;
        let v = self.value.forward(tape, f)?;
        let agg = tape.criss_cross(q, k, v)?;
        tape.add(f, agg)
    }
}

/// `(params, macs)` of the attention's three 1×1 convolutions on an
/// `h × w` map, bias counted as one MAC per output element.
pub fn attention_cost(channels: usize, reduction: usize, h: usize, w: usize) -> (usize, usize) {
    let inner = channels / reduction;
    let per_pos = 2 * (channels * inner + inner) + channels * channels + channels;
    (per_pos, per_pos * h * w)
}
