//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op evaluates eagerly and appends a node to the [`Tape`]. Nodes are
//! topologically ordered by construction, so [`Tape::backward`] is a single
//! reverse sweep.

mod backward;

use std::collections::HashMap;

use crate::entropy::factorized::Chain;
use crate::entropy::gaussian::{bin_mass, LIKELIHOOD_FLOOR};
use crate::error::{shape_err, Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{kernels, Float, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Exp,
    Log,
    Abs,
}

enum Op<T: Float> {
    Leaf,
    Param,
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    Affine { x: Var, scale: T },
    Powf { x: Var, exponent: T },
    ClampMin { x: Var, min: T },
    LowerBound { x: Var, bound: T },
    RoundSte(Var),
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, axis: usize },
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Upsample(Var),
    AvgPool(Var),
    Filter { x: Var, taps: Vec<T> },
    CrissCross { q: Var, k: Var, v: Var, attn: Tensor<T> },
    GaussianLikelihood { y: Var, sigma: Var, scale_bound: f64 },
    FactorizedLikelihood { z: Var, params: [Var; 11] },
    NegLog2Sum(Var),
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph plus gradient buffers.
pub struct Tape<'p, T: Float = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: Option<&'p ParamStore<T>>,
    param_nodes: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<T: Float> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Float> Tape<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), params: None, param_nodes: HashMap::new(), grad_enabled: true }
    }

    /// Tape whose [`Tape::param`] leaves read from `params`.
    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self { params: Some(params), ..Self::new() }
    }

    /// Inference tape: values only, no node requires a gradient.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self { grad_enabled: false, ..Self::with_params(params) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad: requires_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store = self.params.expect("tape has no parameter store");
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.param_nodes.insert(id, v);
        v
    }

    fn broadcast_shape(&self, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.shape() == sb.shape() || sb.numel() == 1 {
            Ok(sa.shape().to_vec())
        } else if sa.numel() == 1 {
            Ok(sb.shape().to_vec())
        } else {
            Err(shape_err(format!("cannot broadcast {:?} with {:?}", sa.shape(), sb.shape())))
        }
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape(a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let at = |d: &[T], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let f = match kind {
            BinaryKind::Add => |x: T, y: T| x + y,
            BinaryKind::Sub => |x: T, y: T| x - y,
            BinaryKind::Mul => |x: T, y: T| x * y,
            BinaryKind::Div => |x: T, y: T| x / y,
        };
        let data = (0..n).map(|i| f(at(da, i), at(db, i))).collect();
        let value = Tensor::new(&shape, data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let f = match kind {
            UnaryKind::Relu => |v: T| if v > T::zero() { v } else { T::zero() },
            UnaryKind::Exp => |v: T| v.exp(),
            UnaryKind::Log => |v: T| v.ln(),
            UnaryKind::Abs => |v: T| v.abs(),
        };
        let value = self.value(x).map(f);
        let rg = self.needs(&[x]);
        self.push(value, Op::Unary(kind, x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x)
    }

    /// `x * scale + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| v * scale + shift);
        let rg = self.needs(&[x]);
        self.push(value, Op::Affine { x, scale }, rg)
    }

    pub fn powf(&mut self, x: Var, exponent: T) -> Var {
        let value = self.value(x).map(|v| v.powf(exponent));
        let rg = self.needs(&[x]);
        self.push(value, Op::Powf { x, exponent }, rg)
    }

    /// `max(x, min)`; no gradient flows where the clamp is active.
    pub fn clamp_min(&mut self, x: Var, min: T) -> Var {
        let value = self.value(x).map(|v| v.max(min));
        let rg = self.needs(&[x]);
        self.push(value, Op::ClampMin { x, min }, rg)
    }

    /// `max(x, bound)`; below the bound the gradient still flows when it
    /// would push `x` upwards.
    pub fn lower_bound(&mut self, x: Var, bound: T) -> Var {
        let value = self.value(x).map(|v| v.max(bound));
        let rg = self.needs(&[x]);
        self.push(value, Op::LowerBound { x, bound }, rg)
    }

    /// Round half to even with an identity (straight-through) gradient.
    pub fn round_ste(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::of(v.as_f64().round_ties_even()));
        let rg = self.needs(&[x]);
        self.push(value, Op::RoundSte(x), rg)
    }

    /// Sum of all elements with 64-bit accumulation.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(T::of(self.value(x).sum_f64()));
        let rg = self.needs(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(T::of(t.sum_f64() / t.numel() as f64));
        let rg = self.needs(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = kernels::softmax(self.value(x), axis)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let value = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let rg = self.needs(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(value, Op::Conv { x, w, b, stride, pad }, rg))
    }

    /// Transposed convolution with output padding `stride - 1`, so that the
    /// output extent is exactly `stride` times the input for `pad = (k-1)/2`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let value = kernels::conv_transpose2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            stride.saturating_sub(1),
        )?;
        let rg = self.needs(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(value, Op::ConvTranspose { x, w, b, stride, pad }, rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let value = kernels::upsample2x(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Upsample(x), rg))
    }

    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let value = kernels::avg_pool2x(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::AvgPool(x), rg))
    }

    /// Depthwise "valid" filtering with separable taps.
    pub fn separable_filter(&mut self, x: Var, taps: &[T]) -> Result<Var> {
        let value = kernels::separable_filter_valid(self.value(x), taps)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Filter { x, taps: taps.to_vec() }, rg))
    }

    /// Softmax-weighted aggregation of `v` over each position's row and column.
    pub fn criss_cross(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (value, attn) = kernels::criss_cross(self.value(q), self.value(k), self.value(v))?;
        let rg = self.needs(&[q, k, v]);
        Ok(self.push(value, Op::CrissCross { q, k, v, attn }, rg))
    }

    /// Zero-mean Gaussian bin likelihood `Φ((y+½)/σ) − Φ((y−½)/σ)` with
    /// `σ` raised to `scale_bound` and the result floored at 2^-24.
    pub fn gaussian_likelihood(&mut self, y: Var, sigma: Var, scale_bound: f64) -> Result<Var> {
        let (ty, ts) = (self.value(y), self.value(sigma));
        if ty.shape() != ts.shape() {
            return Err(shape_err(format!("likelihood: values {:?} vs scales {:?}", ty.shape(), ts.shape())));
        }
        let data = ty
            .data()
            .iter()
            .zip(ts.data())
            .map(|(&v, &s)| {
                let s = s.as_f64();
                let s = if s.is_nan() { scale_bound } else { s.max(scale_bound) };
                T::of(bin_mass(v.as_f64(), s).max(LIKELIHOOD_FLOOR))
            })
            .collect();
        let value = Tensor::new(ty.shape(), data)?;
        let rg = self.needs(&[y, sigma]);
        Ok(self.push(value, Op::GaussianLikelihood { y, sigma, scale_bound }, rg))
    }

    /// Bin likelihood under a learned factorized density. `params` are the
    /// matrices, biases and gating factors in [`crate::entropy::FactorizedDensity::param_ids`] order.
    pub fn factorized_likelihood(&mut self, z: Var, params: [Var; 11]) -> Result<Var> {
        let chain = self.chain(&params);
        let [_, c, h, w] = self.value(z).dims4()?;
        if chain.mats[0].len() != c * 3 {
            return Err(shape_err(format!("factorized density does not have {c} channels")));
        }
        let plane = h * w;
        let data = self
            .value(z)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| T::of(chain.bin_mass((i / plane) % c, v.as_f64()).max(LIKELIHOOD_FLOOR)))
            .collect();
        let value = Tensor::new(self.value(z).shape(), data)?;
        let mut deps = vec![z];
        deps.extend_from_slice(&params);
        let rg = self.needs(&deps);
        Ok(self.push(value, Op::FactorizedLikelihood { z, params }, rg))
    }

    fn chain(&self, params: &[Var; 11]) -> Chain {
        let t = |i: usize| self.value(params[i]);
        Chain::from_tensors([t(0), t(1), t(2), t(3)], [t(4), t(5), t(6), t(7)], [t(8), t(9), t(10)])
    }

    /// Information content `Σ −log2 p` in bits, accumulated in 64 bits.
    pub fn neg_log2_sum(&mut self, p: Var) -> Result<Var> {
        let t = self.value(p);
        if let Some(bad) = t.data().iter().find(|v| !(v.as_f64() > 0.0)) {
            return Err(Error::InvalidArgument(format!("rate of non-positive probability {bad}")));
        }
        let bits: f64 = t.data().iter().map(|v| -v.as_f64().log2()).sum();
        let rg = self.needs(&[p]);
        Ok(self.push(Tensor::scalar(T::of(bits)), Op::NegLog2Sum(p), rg))
    }

    /// Populates gradients of `loss` for every node that requires one.
    /// Tracked nodes the loss does not depend on get zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            self.backward_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        for idx in 0..self.nodes.len() {
            let node = &self.nodes[idx];
            if node.requires_grad && matches!(node.op, Op::Leaf | Op::Param) && self.grads[idx].is_none() {
                self.grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    /// Gradients of every parameter leaf after [`Tape::backward`].
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<_> = self
            .param_nodes
            .iter()
            .map(|(&id, &v)| {
                let g = self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn accumulate(&mut self, v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Folds a gradient of broadcast shape back to the operand's shape.
    fn accumulate_broadcast(&mut self, v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        if self.value(v).numel() == 1 && delta.numel() != 1 {
            let reduced = Tensor::new(self.value(v).shape(), vec![T::of(delta.sum_f64())]).expect("scalar shape");
            self.accumulate(v, reduced);
        } else {
            self.accumulate(v, delta);
        }
    }
}

#[cfg(test)]
mod tests;
