use super::{BinaryKind, Op, Tape, UnaryKind, Var};
use crate::entropy::gaussian::{bin_mass_with_grads, LIKELIHOOD_FLOOR};
use crate::tensor::{kernels, Float, Tensor};

/// Gradient contribution for one operand.
struct Delta<T: Float> {
    var: Var,
    grad: Tensor<T>,
    broadcast: bool,
}

fn delta<T: Float>(var: Var, grad: Tensor<T>) -> Delta<T> {
    Delta { var, grad, broadcast: false }
}

fn zip_map<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

impl<T: Float> Tape<'_, T> {
    pub(super) fn backward_node(&mut self, idx: usize, g: &Tensor<T>) {
        for d in self.node_deltas(idx, g) {
            if d.broadcast {
                self.accumulate_broadcast(d.var, d.grad);
            } else {
                self.accumulate(d.var, d.grad);
            }
        }
    }

    fn node_deltas(&self, idx: usize, g: &Tensor<T>) -> Vec<Delta<T>> {
        let out = &self.nodes[idx].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param => Vec::new(),
            &Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let at = |t: &Tensor<T>, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
                let n = g.numel();
                let mut ds = Vec::new();
                let build = |f: &dyn Fn(usize) -> T| {
                    Tensor::new(g.shape(), (0..n).map(f).collect()).expect("gradient shape")
                };
                let gd = g.data();
                if wants(a) {
                    let grad = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.clone(),
                        BinaryKind::Mul => build(&|i| gd[i] * at(vb, i)),
                        BinaryKind::Div => build(&|i| gd[i] / at(vb, i)),
                    };
                    ds.push(Delta { var: a, grad, broadcast: true });
                }
                if wants(b) {
                    let grad = match kind {
                        BinaryKind::Add => g.clone(),
                        BinaryKind::Sub => g.map(|v| -v),
                        BinaryKind::Mul => build(&|i| gd[i] * at(va, i)),
                        BinaryKind::Div => build(&|i| {
                            let d = at(vb, i);
                            -gd[i] * at(va, i) / (d * d)
                        }),
                    };
                    ds.push(Delta { var: b, grad, broadcast: true });
                }
                ds
            }
            &Op::Unary(kind, x) => {
                let xv = self.value(x);
                let grad = match kind {
                    UnaryKind::Relu => zip_map(g, xv, |g, x| if x > T::zero() { g } else { T::zero() }),
                    UnaryKind::Exp => zip_map(g, out, |g, y| g * y),
                    UnaryKind::Log => zip_map(g, xv, |g, x| g / x),
                    UnaryKind::Abs => zip_map(g, xv, |g, x| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    }),
                };
                vec![delta(x, grad)]
            }
            &Op::Affine { x, scale } => vec![delta(x, g.map(|v| v * scale))],
            &Op::Powf { x, exponent } => {
                let grad = zip_map(g, self.value(x), |g, x| g * exponent * x.powf(exponent - T::one()));
                vec![delta(x, grad)]
            }
            &Op::ClampMin { x, min } => {
                vec![delta(x, zip_map(g, self.value(x), |g, x| if x >= min { g } else { T::zero() }))]
            }
            &Op::LowerBound { x, bound } => {
                vec![delta(x, zip_map(g, self.value(x), |g, x| if x >= bound || g < T::zero() { g } else { T::zero() }))]
            }
            &Op::RoundSte(x) => vec![delta(x, g.clone())],
            &Op::Sum(x) => vec![delta(x, Tensor::full(self.value(x).shape(), g.item()))],
            &Op::Mean(x) => {
                let n = T::of(self.value(x).numel() as f64);
                vec![delta(x, Tensor::full(self.value(x).shape(), g.item() / n))]
            }
            &Op::Softmax { x, axis } => vec![delta(x, kernels::softmax_backward(out, g, axis))],
            &Op::Conv { x, w, b, stride, pad } => {
                let (dx, dw, db) = kernels::conv2d_backward(self.value(x), self.value(w), g, stride, pad, wants(x));
                let mut ds = vec![delta(w, dw)];
                if let Some(dx) = dx {
                    ds.push(delta(x, dx));
                }
                if let Some(b) = b {
                    ds.push(delta(b, db));
                }
                ds
            }
            &Op::ConvTranspose { x, w, b, stride, pad } => {
                let (dx, dw, db) =
                    kernels::conv_transpose2d_backward(self.value(x), self.value(w), g, stride, pad, wants(x));
                let mut ds = vec![delta(w, dw)];
                if let Some(dx) = dx {
                    ds.push(delta(x, dx));
                }
                if let Some(b) = b {
                    ds.push(delta(b, db));
                }
                ds
            }
            &Op::Upsample(x) => vec![delta(x, kernels::upsample2x_backward(self.value(x).shape(), g))],
            &Op::AvgPool(x) => vec![delta(x, kernels::avg_pool2x_backward(self.value(x).shape(), g))],
            Op::Filter { x, taps } => {
                vec![delta(*x, kernels::separable_filter_valid_backward(self.value(*x).shape(), taps, g))]
            }
            Op::CrissCross { q, k, v, attn } => {
                let (dq, dk, dv) =
                    kernels::criss_cross_backward(self.value(*q), self.value(*k), self.value(*v), attn, g);
                vec![delta(*q, dq), delta(*k, dk), delta(*v, dv)]
            }
            &Op::GaussianLikelihood { y, sigma, scale_bound } => {
                let (vy, vs) = (self.value(y), self.value(sigma));
                let n = g.numel();
                let mut dy = Vec::with_capacity(n);
                let mut ds = Vec::with_capacity(n);
                for i in 0..n {
                    let s_raw = vs.data()[i].as_f64();
                    let clamped = !(s_raw >= scale_bound);
                    let s = if clamped { scale_bound } else { s_raw };
                    let (p, dp_dy, dp_ds) = bin_mass_with_grads(vy.data()[i].as_f64(), s);
                    let gi = g.data()[i].as_f64();
                    let gi = if p >= LIKELIHOOD_FLOOR || gi < 0.0 { gi } else { 0.0 };
                    dy.push(T::of(gi * dp_dy));
                    ds.push(T::of(if clamped { 0.0 } else { gi * dp_ds }));
                }
                vec![
                    delta(y, Tensor::new(vy.shape(), dy).expect("shape")),
                    delta(sigma, Tensor::new(vs.shape(), ds).expect("shape")),
                ]
            }
            Op::FactorizedLikelihood { z, params } => {
                let chain = self.chain(params);
                let mut grads = chain.zero_grads();
                let vz = self.value(*z);
                let [_, c, h, w] = vz.dims4().expect("validated in forward");
                let plane = h * w;
                let mut dz = Vec::with_capacity(vz.numel());
                for (i, (&v, &gv)) in vz.data().iter().zip(g.data()).enumerate() {
                    let gi = gv.as_f64();
                    let p = out.data()[i].as_f64();
                    let gi = if p > LIKELIHOOD_FLOOR || gi < 0.0 { gi } else { 0.0 };
                    dz.push(T::of(chain.bin_mass_backward((i / plane) % c, v.as_f64(), gi, &mut grads)));
                }
                let mut ds = vec![delta(*z, Tensor::new(vz.shape(), dz).expect("shape"))];
                let flat = grads.mats.into_iter().chain(grads.biases).chain(grads.factors);
                for (&pv, gvec) in params.iter().zip(flat) {
                    let shape = self.value(pv).shape();
                    ds.push(delta(pv, Tensor::new(shape, gvec.into_iter().map(T::of).collect()).expect("shape")));
                }
                ds
            }
            &Op::NegLog2Sum(p) => {
                let scale = -g.item().as_f64() / std::f64::consts::LN_2;
                vec![delta(p, self.value(p).map(|v| T::of(scale / v.as_f64())))]
            }
        }
    }
}
