//! Forward and adjoint kernels on `[N, C, H, W]` tensors.
//!
//! Convolutions lower to im2col + GEMM. Every backward function here is the
//! exact adjoint of its forward counterpart.

use super::{Float, MatRef, Tensor};
use crate::error::{shape_err, Result};

/// Output extent of a convolution along one axis.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out_len(len: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize) -> Option<usize> {
    ((len - 1) * stride + kernel + out_pad).checked_sub(2 * pad)
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geom {
    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Float>(x: &[T], g: &Geom, col: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add adjoint of [`im2col`].
fn col2im<T: Float>(col: &[T], g: &Geom, x: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_weight<T: Float>(weight: &Tensor<T>) -> Result<[usize; 4]> {
    let [a, b, kh, kw] = weight.dims4()?;
    if kh != kw {
        return Err(shape_err(format!("kernel must be square, got {kh}x{kw}")));
    }
    Ok([a, b, kh, kw])
}

fn check_bias<T: Float>(bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.numel() != channels => {
            Err(shape_err(format!("bias has {} entries, layer has {channels} output channels", b.numel())))
        }
        _ => Ok(()),
    }
}

fn add_bias<T: Float>(out: &mut [T], bias: Option<&Tensor<T>>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(plane).zip(b.data().iter().cycle()) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_grad<T: Float>(dout: &Tensor<T>, channels: usize) -> Tensor<T> {
    let [n, c, h, w] = dout.dims4().expect("rank-4 gradient");
    debug_assert_eq!(c, channels);
    let plane = h * w;
    let mut acc = vec![0f64; channels];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            acc[ch] += dout.data()[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    Tensor::new(&[channels], acc.into_iter().map(T::of).collect()).expect("bias shape")
}

/// 2-D cross-correlation. `weight` is `[C_out, C_in, k, k]`.
pub fn conv2d<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4()?;
    let [co, ci, k, _] = check_weight(weight)?;
    if ci != c {
        return Err(shape_err(format!("conv2d: input has {c} channels, weight expects {ci}")));
    }
    check_bias(bias, co)?;
    let (out_h, out_w) = match (conv_out_len(h, k, stride, pad), conv_out_len(w, k, stride, pad)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(shape_err(format!("conv2d: {h}x{w} input too small for kernel {k} with padding {pad}"))),
    };
    let g = Geom { channels: c, height: h, width: w, kernel: k, stride, pad, out_h, out_w };
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); n * co * cols];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
    let wmat = MatRef::new(weight.data(), co, rows);
    for s in 0..n {
        let x = &input.data()[s * c * h * w..(s + 1) * c * h * w];
        let colref = if g.is_pointwise() {
            MatRef::new(x, rows, cols)
        } else {
            im2col(x, &g, &mut col);
            MatRef::new(&col, rows, cols)
        };
        T::gemm(T::one(), wmat, colref, T::zero(), &mut out[s * co * cols..(s + 1) * co * cols]);
    }
    add_bias(&mut out, bias, cols);
    Tensor::new(&[n, co, out_h, out_w], out)
}

/// Gradients of [`conv2d`]: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_input_grad: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = input.dims4().expect("validated in forward");
    let [co, _, k, _] = weight.dims4().expect("validated in forward");
    let [_, _, out_h, out_w] = dout.dims4().expect("validated in forward");
    let g = Geom { channels: c, height: h, width: w, kernel: k, stride, pad, out_h, out_w };
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut dw = vec![T::zero(); co * rows];
    let mut dx = want_input_grad.then(|| vec![T::zero(); input.numel()]);
    let mut col = vec![T::zero(); rows * cols];
    let wmat = MatRef::new(weight.data(), co, rows);
    for s in 0..n {
        let x = &input.data()[s * c * h * w..(s + 1) * c * h * w];
        let dy = MatRef::new(&dout.data()[s * co * cols..(s + 1) * co * cols], co, cols);
        if g.is_pointwise() {
            T::gemm(T::one(), dy, MatRef::new(x, rows, cols).t(), T::one(), &mut dw);
        } else {
            im2col(x, &g, &mut col);
            T::gemm(T::one(), dy, MatRef::new(&col, rows, cols).t(), T::one(), &mut dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * c * h * w..(s + 1) * c * h * w];
            if g.is_pointwise() {
                T::gemm(T::one(), wmat.t(), dy, T::zero(), dxs);
            } else {
                T::gemm(T::one(), wmat.t(), dy, T::zero(), &mut col);
                col2im(&col, &g, dxs);
            }
        }
    }
    let dx = dx.map(|d| Tensor::new(input.shape(), d).expect("input shape"));
    let dw = Tensor::new(weight.shape(), dw).expect("weight shape");
    (dx, dw, bias_grad(dout, co))
}

/// Transposed convolution. `weight` is `[C_in, C_out, k, k]`.
pub fn conv_transpose2d<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4()?;
    let [ci, co, k, _] = check_weight(weight)?;
    if ci != c {
        return Err(shape_err(format!("conv_transpose2d: input has {c} channels, weight expects {ci}")));
    }
    if out_pad >= stride.max(1) {
        return Err(shape_err("conv_transpose2d: output padding must be smaller than stride"));
    }
    check_bias(bias, co)?;
    let (out_h, out_w) = match (
        conv_transpose_out_len(h, k, stride, pad, out_pad),
        conv_transpose_out_len(w, k, stride, pad, out_pad),
    ) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => return Err(shape_err("conv_transpose2d: padding exceeds output extent")),
    };
    // The forward pass is the adjoint of a convolution from the output grid to the input grid.
    let g = Geom { channels: co, height: out_h, width: out_w, kernel: k, stride, pad, out_h: h, out_w: w };
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); n * co * out_h * out_w];
    let mut col = vec![T::zero(); rows * cols];
    let wmat = MatRef::new(weight.data(), ci, rows);
    for s in 0..n {
        let x = MatRef::new(&input.data()[s * c * h * w..(s + 1) * c * h * w], c, cols);
        T::gemm(T::one(), wmat.t(), x, T::zero(), &mut col);
        col2im(&col, &g, &mut out[s * co * out_h * out_w..(s + 1) * co * out_h * out_w]);
    }
    add_bias(&mut out, bias, out_h * out_w);
    Tensor::new(&[n, co, out_h, out_w], out)
}

/// Gradients of [`conv_transpose2d`]: `(d_input, d_weight, d_bias)`.
pub fn conv_transpose2d_backward<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_input_grad: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = input.dims4().expect("validated in forward");
    let [ci, co, k, _] = weight.dims4().expect("validated in forward");
    let [_, _, out_h, out_w] = dout.dims4().expect("validated in forward");
    let g = Geom { channels: co, height: out_h, width: out_w, kernel: k, stride, pad, out_h: h, out_w: w };
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut dw = vec![T::zero(); ci * rows];
    let mut dx = want_input_grad.then(|| vec![T::zero(); input.numel()]);
    let mut col = vec![T::zero(); rows * cols];
    let wmat = MatRef::new(weight.data(), ci, rows);
    for s in 0..n {
        im2col(&dout.data()[s * co * out_h * out_w..(s + 1) * co * out_h * out_w], &g, &mut col);
        let colref = MatRef::new(&col, rows, cols);
        let x = MatRef::new(&input.data()[s * c * h * w..(s + 1) * c * h * w], c, cols);
        T::gemm(T::one(), x, colref.t(), T::one(), &mut dw);
        if let Some(dx) = dx.as_mut() {
            T::gemm(T::one(), wmat, colref, T::zero(), &mut dx[s * c * h * w..(s + 1) * c * h * w]);
        }
    }
    let dx = dx.map(|d| Tensor::new(input.shape(), d).expect("input shape"));
    let dw = Tensor::new(weight.shape(), dw).expect("weight shape");
    (dx, dw, bias_grad(dout, co))
}

/// Source taps of a half-pixel ×2 bilinear upsampling along one axis.
///
/// Output index `j` samples source coordinate `(j + 0.5) / 2 - 0.5`, with
/// out-of-range neighbours clamped to the edge.
pub fn upsample_taps(len: usize) -> Vec<[(usize, f64); 2]> {
    (0..2 * len)
        .map(|j| {
            let src = (j as f64 + 0.5) / 2.0 - 0.5;
            let lo = src.floor();
            let frac = src - lo;
            let clamp = |i: f64| i.max(0.0).min((len - 1) as f64) as usize;
            [(clamp(lo), 1.0 - frac), (clamp(lo + 1.0), frac)]
        })
        .collect()
}

pub fn upsample2x<T: Float>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4()?;
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut rows = vec![T::zero(); h * ow];
    for (plane, dst) in input.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for y in 0..h {
            for (x, taps) in tx.iter().enumerate() {
                rows[y * ow + x] = taps
                    .iter()
                    .fold(T::zero(), |acc, &(i, wt)| acc + T::of(wt) * plane[y * w + i]);
            }
        }
        for (y, taps) in ty.iter().enumerate() {
            for x in 0..ow {
                dst[y * ow + x] = taps
                    .iter()
                    .fold(T::zero(), |acc, &(i, wt)| acc + T::of(wt) * rows[i * ow + x]);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn upsample2x_backward<T: Float>(input_shape: &[usize], dout: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    let mut rows = vec![T::zero(); h * ow];
    for (dy, dst) in dout.data().chunks(oh * ow).zip(dx.chunks_mut(h * w)) {
        rows.fill(T::zero());
        for (y, taps) in ty.iter().enumerate() {
            for x in 0..ow {
                let g = dy[y * ow + x];
                for &(i, wt) in taps {
                    rows[i * ow + x] += T::of(wt) * g;
                }
            }
        }
        for y in 0..h {
            for (x, taps) in tx.iter().enumerate() {
                let g = rows[y * ow + x];
                for &(i, wt) in taps {
                    dst[y * w + i] += T::of(wt) * g;
                }
            }
        }
    }
    Tensor::new(input_shape, dx).expect("input shape")
}

/// 2×2 average pooling, dropping a trailing odd row/column.
pub fn avg_pool2x<T: Float>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(shape_err(format!("avg_pool2x: {h}x{w} input too small")));
    }
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (plane, dst) in input.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for y in 0..oh {
            for x in 0..ow {
                let (a, b) = (2 * y * w + 2 * x, (2 * y + 1) * w + 2 * x);
                dst[y * ow + x] = quarter * (plane[a] + plane[a + 1] + plane[b] + plane[b + 1]);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn avg_pool2x_backward<T: Float>(input_shape: &[usize], dout: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    for (dy, dst) in dout.data().chunks(oh * ow).zip(dx.chunks_mut(h * w)) {
        for y in 0..oh {
            for x in 0..ow {
                let g = quarter * dy[y * ow + x];
                let (a, b) = (2 * y * w + 2 * x, (2 * y + 1) * w + 2 * x);
                dst[a] += g;
                dst[a + 1] += g;
                dst[b] += g;
                dst[b + 1] += g;
            }
        }
    }
    Tensor::new(input_shape, dx).expect("input shape")
}

/// Depthwise separable "valid" filtering with the same 1-D taps on both axes.
pub fn separable_filter_valid<T: Float>(input: &Tensor<T>, taps: &[T]) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4()?;
    let k = taps.len();
    if h < k || w < k {
        return Err(shape_err(format!("filter of length {k} does not fit a {h}x{w} input")));
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut tmp = vec![T::zero(); h * ow];
    for (plane, dst) in input.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for x in 0..ow {
                tmp[y * ow + x] = taps.iter().zip(&row[x..x + k]).fold(T::zero(), |a, (&t, &v)| a + t * v);
            }
        }
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = taps
                    .iter()
                    .enumerate()
                    .fold(T::zero(), |a, (i, &t)| a + t * tmp[(y + i) * ow + x]);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn separable_filter_valid_backward<T: Float>(input_shape: &[usize], taps: &[T], dout: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    let mut tmp = vec![T::zero(); h * ow];
    for (dy, dst) in dout.data().chunks(oh * ow).zip(dx.chunks_mut(h * w)) {
        tmp.fill(T::zero());
        for y in 0..oh {
            for x in 0..ow {
                let g = dy[y * ow + x];
                for (i, &t) in taps.iter().enumerate() {
                    tmp[(y + i) * ow + x] += t * g;
                }
            }
        }
        for y in 0..h {
            for x in 0..ow {
                let g = tmp[y * ow + x];
                for (i, &t) in taps.iter().enumerate() {
                    dst[y * w + x + i] += t * g;
                }
            }
        }
    }
    Tensor::new(input_shape, dx).expect("input shape")
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
pub fn axis_extents(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err(format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok((shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product()))
}

/// Max-stabilised softmax along `axis`.
pub fn softmax<T: Float>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_extents(input.shape(), axis)?;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
            let mut total = 0f64;
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                total += e.as_f64();
            }
            let inv = T::of(1.0 / total);
            for j in 0..len {
                out[at(j)] *= inv;
            }
        }
    }
    Tensor::new(input.shape(), out)
}

pub fn softmax_backward<T: Float>(output: &Tensor<T>, dout: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_extents(output.shape(), axis).expect("validated in forward");
    let (y, g) = (output.data(), dout.data());
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: f64 = (0..len).map(|j| (y[at(j)] * g[at(j)]).as_f64()).sum();
            let dot = T::of(dot);
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    Tensor::new(output.shape(), dx).expect("output shape")
}

/// Number of positions in the criss-cross support of an `h × w` map.
pub fn criss_cross_support(h: usize, w: usize) -> usize {
    h + w - 1
}

/// Position `(row, col)` of support slot `s` for query `(i, j)`: the full row
/// first, then the column without the shared query position.
#[inline]
fn support_pos(i: usize, j: usize, s: usize, w: usize) -> (usize, usize) {
    if s < w {
        (i, s)
    } else {
        let r = s - w;
        (if r < i { r } else { r + 1 }, j)
    }
}

fn to_hwc<T: Float>(x: &[T], c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        for p in 0..hw {
            out[p * c + ch] = x[ch * hw + p];
        }
    }
    out
}

fn from_hwc_add<T: Float>(x: &[T], c: usize, hw: usize, dst: &mut [T]) {
    for ch in 0..c {
        for p in 0..hw {
            dst[ch * hw + p] += x[p * c + ch];
        }
    }
}

/// Criss-cross aggregation. Returns the aggregated values `[N, C, H, W]` and
/// the attention weights `[N, H, W, H + W - 1]`.
pub fn criss_cross<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, cq, h, w] = q.dims4()?;
    let [_, cv, _, _] = v.dims4()?;
    if k.shape() != q.shape() || v.shape()[0] != n || v.shape()[2..] != q.shape()[2..] {
        return Err(shape_err(format!(
            "criss_cross: query {:?}, key {:?} and value {:?} disagree",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (hw, support) = (h * w, criss_cross_support(h, w));
    let mut out = vec![T::zero(); n * cv * hw];
    let mut attn = vec![T::zero(); n * hw * support];
    let mut energy = vec![0f64; support];
    for s in 0..n {
        let qs = to_hwc(&q.data()[s * cq * hw..(s + 1) * cq * hw], cq, hw);
        let ks = to_hwc(&k.data()[s * cq * hw..(s + 1) * cq * hw], cq, hw);
        let vs = to_hwc(&v.data()[s * cv * hw..(s + 1) * cv * hw], cv, hw);
        let mut agg = vec![T::zero(); hw * cv];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let qv = &qs[p * cq..(p + 1) * cq];
                let mut max = f64::NEG_INFINITY;
                for (slot, e) in energy.iter_mut().enumerate() {
                    let (r, c) = support_pos(i, j, slot, w);
                    let kp = (r * w + c) * cq;
                    *e = qv.iter().zip(&ks[kp..kp + cq]).map(|(&a, &b)| (a * b).as_f64()).sum();
                    max = max.max(*e);
                }
                let total: f64 = energy.iter_mut().map(|e| {
                    *e = (*e - max).exp();
                    *e
                }).sum();
                let a_row = &mut attn[(s * hw + p) * support..(s * hw + p + 1) * support];
                let dst = &mut agg[p * cv..(p + 1) * cv];
                for (slot, a) in a_row.iter_mut().enumerate() {
                    *a = T::of(energy[slot] / total);
                    let (r, c) = support_pos(i, j, slot, w);
                    let vp = (r * w + c) * cv;
                    for (d, &vv) in dst.iter_mut().zip(&vs[vp..vp + cv]) {
                        *d += *a * vv;
                    }
                }
            }
        }
        from_hwc_add(&agg, cv, hw, &mut out[s * cv * hw..(s + 1) * cv * hw]);
    }
    Ok((Tensor::new(v.shape(), out)?, Tensor::new(&[n, h, w, support], attn)?))
}

/// Gradients of [`criss_cross`] with respect to query, key and value.
pub fn criss_cross_backward<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    attn: &Tensor<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, cq, h, w] = q.dims4().expect("validated in forward");
    let cv = v.shape()[1];
    let (hw, support) = (h * w, criss_cross_support(h, w));
    let mut dq = vec![T::zero(); q.numel()];
    let mut dk = vec![T::zero(); k.numel()];
    let mut dv = vec![T::zero(); v.numel()];
    let mut da = vec![0f64; support];
    for s in 0..n {
        let qs = to_hwc(&q.data()[s * cq * hw..(s + 1) * cq * hw], cq, hw);
        let ks = to_hwc(&k.data()[s * cq * hw..(s + 1) * cq * hw], cq, hw);
        let vs = to_hwc(&v.data()[s * cv * hw..(s + 1) * cv * hw], cv, hw);
        let gs = to_hwc(&dout.data()[s * cv * hw..(s + 1) * cv * hw], cv, hw);
        let mut dqs = vec![T::zero(); hw * cq];
        let mut dks = vec![T::zero(); hw * cq];
        let mut dvs = vec![T::zero(); hw * cv];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let g = &gs[p * cv..(p + 1) * cv];
                let a_row = &attn.data()[(s * hw + p) * support..(s * hw + p + 1) * support];
                let mut dot = 0f64;
                for (slot, d) in da.iter_mut().enumerate() {
                    let (r, c) = support_pos(i, j, slot, w);
                    let vp = (r * w + c) * cv;
                    *d = g.iter().zip(&vs[vp..vp + cv]).map(|(&a, &b)| (a * b).as_f64()).sum();
                    dot += a_row[slot].as_f64() * *d;
                    for (dst, &gv) in dvs[vp..vp + cv].iter_mut().zip(g) {
                        *dst += a_row[slot] * gv;
                    }
                }
                for (slot, &d) in da.iter().enumerate() {
                    let de = T::of(a_row[slot].as_f64() * (d - dot));
                    let (r, c) = support_pos(i, j, slot, w);
                    let kp = (r * w + c) * cq;
                    for ch in 0..cq {
                        dqs[p * cq + ch] += de * ks[kp + ch];
                        dks[kp + ch] += de * qs[p * cq + ch];
                    }
                }
            }
        }
        from_hwc_add(&dqs, cq, hw, &mut dq[s * cq * hw..(s + 1) * cq * hw]);
        from_hwc_add(&dks, cq, hw, &mut dk[s * cq * hw..(s + 1) * cq * hw]);
        from_hwc_add(&dvs, cv, hw, &mut dv[s * cv * hw..(s + 1) * cv * hw]);
    }
    (
        Tensor::new(q.shape(), dq).expect("query shape"),
        Tensor::new(k.shape(), dk).expect("key shape"),
        Tensor::new(v.shape(), dv).expect("value shape"),
    )
}
