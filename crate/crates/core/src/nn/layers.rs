use rand::Rng;

use super::{kaiming_uniform, ParamId, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Nonlinearity placed between intermediate convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply<T: Float>(self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" | "none" => Ok(Activation::Identity),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

fn check_kernel(kernel: usize) -> Result<()> {
    if matches!(kernel, 1 | 3 | 5) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("kernel size must be 1, 3 or 5, got {kernel}")))
    }
}

fn check_stride(stride: usize) -> Result<()> {
    if matches!(stride, 1 | 2) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("stride must be 1 or 2, got {stride}")))
    }
}

/// Convolution with bias and "same" padding `(k - 1) / 2`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_kernel(kernel)?;
        check_stride(stride)?;
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?;
        Ok(Self { weight, bias, in_channels, out_channels, kernel, stride })
    }

    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.weight), tape.param(self.bias));
        tape.conv2d(x, w, Some(b), self.stride, self.padding())
    }
}

/// Transposed convolution whose output is exactly `stride` times larger.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_kernel(kernel)?;
        check_stride(stride)?;
        // Each output sample sees about k²/s² input taps per input channel.
        let fan_in = (in_channels * kernel * kernel / (stride * stride)).max(1);
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[in_channels, out_channels, kernel, kernel], fan_in, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?;
        Ok(Self { weight, bias, in_channels, out_channels, kernel, stride })
    }

    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.weight), tape.param(self.bias));
        tape.conv_transpose2d(x, w, Some(b), self.stride, self.padding())
    }
}
