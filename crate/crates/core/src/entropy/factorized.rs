//! Learned channel-wise univariate density for the hyper-latents.
//!
//! Each channel owns a small monotone network `x -> logit` built from
//! positive (softplus-reparameterised) matrices and tanh gating; the
//! cumulative is `sigmoid(logit)`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// Layer widths of the per-channel cumulative network.
pub const DIMS: [usize; 5] = [1, 3, 3, 3, 1];
const DEPTH: usize = DIMS.len() - 1;
const INIT_SCALE: f64 = 10.0;

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Parameter views of all channels, in `f64`.
pub(crate) struct Chain {
    pub mats: [Vec<f64>; DEPTH],
    pub biases: [Vec<f64>; DEPTH],
    pub factors: [Vec<f64>; DEPTH - 1],
}

/// Activations of one evaluation, kept for the backward sweep.
#[derive(Default)]
pub(crate) struct Trace {
    inputs: [[f64; 3]; DEPTH],
    pre: [[f64; 3]; DEPTH],
}

pub(crate) struct ChainGrads {
    pub mats: [Vec<f64>; DEPTH],
    pub biases: [Vec<f64>; DEPTH],
    pub factors: [Vec<f64>; DEPTH - 1],
}

impl Chain {
    pub fn from_tensors<T: Float>(mats: [&Tensor<T>; DEPTH], biases: [&Tensor<T>; DEPTH], factors: [&Tensor<T>; DEPTH - 1]) -> Self {
        let conv = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>();
        Self {
            mats: mats.map(conv),
            biases: biases.map(conv),
            factors: factors.map(conv),
        }
    }

    pub fn zero_grads(&self) -> ChainGrads {
        ChainGrads {
            mats: self.mats.clone().map(|v| vec![0.0; v.len()]),
            biases: self.biases.clone().map(|v| vec![0.0; v.len()]),
            factors: self.factors.clone().map(|v| vec![0.0; v.len()]),
        }
    }

    pub fn logit(&self, channel: usize, x: f64) -> f64 {
        self.forward(channel, x, &mut Trace::default())
    }

    pub fn forward(&self, channel: usize, x: f64, trace: &mut Trace) -> f64 {
        let mut cur = [x, 0.0, 0.0];
        for layer in 0..DEPTH {
            let (fan_in, fan_out) = (DIMS[layer], DIMS[layer + 1]);
            let mat = &self.mats[layer][channel * fan_out * fan_in..];
            let bias = &self.biases[layer][channel * fan_out..];
            trace.inputs[layer] = cur;
            let mut next = [0.0; 3];
            for o in 0..fan_out {
                let mut acc = bias[o];
                for i in 0..fan_in {
                    acc += softplus(mat[o * fan_in + i]) * cur[i];
                }
                trace.pre[layer][o] = acc;
                next[o] = if layer < DEPTH - 1 {
                    acc + self.factors[layer][channel * fan_out + o].tanh() * acc.tanh()
                } else {
                    acc
                };
            }
            cur = next;
        }
        cur[0]
    }

    /// Accumulates parameter gradients for upstream gradient `g` on the
    /// logit and returns the gradient with respect to the input.
    pub fn backward(&self, channel: usize, trace: &Trace, g: f64, grads: &mut ChainGrads) -> f64 {
        let mut upstream = [g, 0.0, 0.0];
        for layer in (0..DEPTH).rev() {
            let (fan_in, fan_out) = (DIMS[layer], DIMS[layer + 1]);
            let mut dpre = [0.0; 3];
            for o in 0..fan_out {
                if layer < DEPTH - 1 {
                    let idx = channel * fan_out + o;
                    let (ta, th) = (self.factors[layer][idx].tanh(), trace.pre[layer][o].tanh());
                    dpre[o] = upstream[o] * (1.0 + ta * (1.0 - th * th));
                    grads.factors[layer][idx] += upstream[o] * th * (1.0 - ta * ta);
                } else {
                    dpre[o] = upstream[o];
                }
                grads.biases[layer][channel * fan_out + o] += dpre[o];
            }
            let mut dinput = [0.0; 3];
            for o in 0..fan_out {
                for i in 0..fan_in {
                    let idx = channel * fan_out * fan_in + o * fan_in + i;
                    let m = self.mats[layer][idx];
                    grads.mats[layer][idx] += dpre[o] * trace.inputs[layer][i] * sigmoid(m);
                    dinput[i] += softplus(m) * dpre[o];
                }
            }
            upstream = dinput;
        }
        upstream[0]
    }

    fn bin_logits(&self, channel: usize, value: f64, lower: &mut Trace, upper: &mut Trace) -> (f64, f64) {
        (self.forward(channel, value - 0.5, lower), self.forward(channel, value + 0.5, upper))
    }

    /// Unfloored mass of the integer bin around `value`.
    pub fn bin_mass(&self, channel: usize, value: f64) -> f64 {
        let (mut tl, mut tu) = (Trace::default(), Trace::default());
        let (lower, upper) = self.bin_logits(channel, value, &mut tl, &mut tu);
        bin_from_logits(lower, upper).0
    }

    /// Backward of [`Chain::bin_mass`] for upstream gradient `g`: accumulates
    /// parameter gradients and returns the gradient with respect to `value`.
    pub fn bin_mass_backward(&self, channel: usize, value: f64, g: f64, grads: &mut ChainGrads) -> f64 {
        let (mut tl, mut tu) = (Trace::default(), Trace::default());
        let (lower, upper) = self.bin_logits(channel, value, &mut tl, &mut tu);
        let (_, dp_dlower, dp_dupper) = bin_from_logits(lower, upper);
        self.backward(channel, &tu, g * dp_dupper, grads) + self.backward(channel, &tl, g * dp_dlower, grads)
    }
}

/// `(p, dp/dlower, dp/dupper)` from the logits at the two bin edges.
fn bin_from_logits(lower: f64, upper: f64) -> (f64, f64, f64) {
    // Evaluate on the side of the logistic where differences keep precision.
    let sign = if lower + upper > 0.0 { -1.0 } else { 1.0 };
    let (su, sl) = (sigmoid(sign * upper), sigmoid(sign * lower));
    let diff = su - sl;
    let dsign = if diff >= 0.0 { 1.0 } else { -1.0 };
    (diff.abs(), -dsign * sign * sl * (1.0 - sl), dsign * sign * su * (1.0 - su))
}

/// Registered parameters of a factorized density over `channels` channels.
#[derive(Clone, Debug)]
pub struct FactorizedDensity {
    channels: usize,
    matrices: [ParamId; DEPTH],
    biases: [ParamId; DEPTH],
    factors: [ParamId; DEPTH - 1],
}

impl FactorizedDensity {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("factorized density needs at least one channel".into()));
        }
        let scale = INIT_SCALE.powf(1.0 / DEPTH as f64);
        let mut matrices = Vec::with_capacity(DEPTH);
        let mut biases = Vec::with_capacity(DEPTH);
        let mut factors = Vec::with_capacity(DEPTH - 1);
        for layer in 0..DEPTH {
            let (fan_in, fan_out) = (DIMS[layer], DIMS[layer + 1]);
            let init = (1.0 / scale / fan_out as f64).exp_m1().ln() as f32;
            matrices.push(store.add(
                format!("{prefix}.matrix{layer}"),
                Tensor::full(&[channels, fan_out, fan_in], init),
            )?);
            biases.push(store.add(
                format!("{prefix}.bias{layer}"),
                Tensor::from_fn(&[channels, fan_out], |_| rng.gen_range(-0.5f32..0.5)),
            )?);
            if layer < DEPTH - 1 {
                factors.push(store.add(format!("{prefix}.factor{layer}"), Tensor::zeros(&[channels, fan_out]))?);
            }
        }
        Ok(Self {
            channels,
            matrices: matrices.try_into().expect("depth"),
            biases: biases.try_into().expect("depth"),
            factors: factors.try_into().expect("depth"),
        })
    }

    /// Re-binds to parameters already present in `store` (e.g. after loading).
    pub fn bind(store: &ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        let find = |name: String| {
            store.id(&name).ok_or_else(|| Error::ModelMismatch(format!("missing parameter `{name}`")))
        };
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for layer in 0..DEPTH {
            matrices.push(find(format!("{prefix}.matrix{layer}"))?);
            biases.push(find(format!("{prefix}.bias{layer}"))?);
            if layer < DEPTH - 1 {
                factors.push(find(format!("{prefix}.factor{layer}"))?);
            }
        }
        Ok(Self {
            channels,
            matrices: matrices.try_into().expect("depth"),
            biases: biases.try_into().expect("depth"),
            factors: factors.try_into().expect("depth"),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// All parameter ids in the operand order expected by the tape op.
    pub fn param_ids(&self) -> [ParamId; 11] {
        let m = self.matrices;
        let b = self.biases;
        let f = self.factors;
        [m[0], m[1], m[2], m[3], b[0], b[1], b[2], b[3], f[0], f[1], f[2]]
    }

    /// Bin likelihoods of `values` (`[N, C, H, W]`), floored at 2^-24.
    pub fn likelihood<T: Float>(&self, tape: &mut Tape<'_, T>, values: Var) -> Result<Var> {
        let c = tape.value(values).dims4()?[1];
        if c != self.channels {
            return Err(Error::Shape(format!(
                "factorized density has {} channels, input has {c}",
                self.channels
            )));
        }
        let params = self.param_ids().map(|id| tape.param(id));
        tape.factorized_likelihood(values, params)
    }

    pub(crate) fn chain<T: Float>(&self, store: &ParamStore<T>) -> Chain {
        let g = |id: ParamId| store.get(id);
        Chain::from_tensors(self.matrices.map(g), self.biases.map(g), self.factors.map(g))
    }

    /// Evaluator of the learned cumulative for table construction and tests.
    pub fn cumulative<'a>(&'a self, store: &'a ParamStore) -> Cumulative {
        Cumulative { chain: self.chain(store) }
    }
}

/// Frozen evaluator of the per-channel cumulative function.
pub struct Cumulative {
    chain: Chain,
}

impl Cumulative {
    pub fn cdf(&self, channel: usize, x: f64) -> f64 {
        sigmoid(self.chain.logit(channel, x))
    }

    pub fn logit(&self, channel: usize, x: f64) -> f64 {
        self.chain.logit(channel, x)
    }

    /// Unfloored mass of the integer bin around `value`.
    pub fn bin_mass(&self, channel: usize, value: f64) -> f64 {
        self.chain.bin_mass(channel, value)
    }
}
