//! Central finite-difference gradient checks shared by the integration tests.
#![allow(dead_code)]

use freqcodec::autodiff::{Tape, Var};
use freqcodec::entropy::FactorizedDensity;
use freqcodec::fusion::CrissCrossAttention;
use freqcodec::metrics::quality::ms_ssim_var;
use freqcodec::nn::{ParamId, ParamStore};
use freqcodec::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const COORDS_PER_PARAM: usize = 8;
const GRAD_FLOOR: f64 = 1e-4;

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element contributes.
fn project(tape: &mut Tape<'_, f64>, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = uniform(&mut rng, tape.value(out).shape(), -1.0, 1.0);
    let r = tape.constant(r);
    let prod = tape.mul(out, r).expect("same shape");
    tape.sum(prod)
}

fn eval(store: &ParamStore<f64>, build: &dyn Fn(&mut Tape<'_, f64>) -> Var) -> f64 {
    let mut tape = Tape::with_params(store);
    let l = build(&mut tape);
    tape.value(l).item()
}

/// Worst per-parameter relative error `‖fd − g‖ / max(‖fd‖, ‖g‖)` over a
/// random sample of coordinates of every parameter in `store`.
pub fn max_relative_error(
    store: &ParamStore<f64>,
    build: &dyn Fn(&mut Tape<'_, f64>) -> Var,
    rng: &mut impl Rng,
) -> f64 {
    let mut tape = Tape::with_params(store);
    let l = build(&mut tape);
    tape.backward(l).expect("scalar loss");
    let grads: Vec<(ParamId, Tensor<f64>)> = tape.param_grads();
    assert_eq!(grads.len(), store.len(), "every parameter must receive a gradient");
    let mut worst: f64 = 0.0;
    for (id, g) in grads {
        let n = g.numel();
        let coords: Vec<usize> =
            if n <= COORDS_PER_PARAM { (0..n).collect() } else { (0..COORDS_PER_PARAM).map(|_| rng.gen_range(0..n)).collect() };
        let (mut diff, mut nf, mut ng) = (0.0, 0.0, 0.0);
        for i in coords {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += EPS;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= EPS;
            let fd = (eval(&plus, build) - eval(&minus, build)) / (2.0 * EPS);
            let an = g.data()[i];
            diff += (fd - an).powi(2);
            nf += fd * fd;
            ng += an * an;
        }
        // The floor covers gradients that vanish analytically (key biases
        // under softmax), where central differences only see rounding noise.
        let scale = nf.sqrt().max(ng.sqrt()).max(GRAD_FLOOR);
        worst = worst.max(diff.sqrt() / scale);
    }
    worst
}

pub struct Case {
    pub name: &'static str,
    pub tolerance: f64,
    pub run: fn(u64) -> f64,
}

fn conv(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stride = 1 + (seed as usize % 2);
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", uniform(&mut rng, &[2, 3, 8, 8], -1.0, 1.0)).unwrap();
    let w = store.add("w", uniform(&mut rng, &[4, 3, 3, 3], -0.5, 0.5)).unwrap();
    let b = store.add("b", uniform(&mut rng, &[4], -0.5, 0.5)).unwrap();
    let build = move |t: &mut Tape<'_, f64>| {
        let (xv, wv, bv) = (t.param(x), t.param(w), t.param(b));
        let y = t.conv2d(xv, wv, Some(bv), stride, 1).unwrap();
        project(t, y, seed)
    };
    max_relative_error(&store, &build, &mut rng)
}

fn conv_transpose(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", uniform(&mut rng, &[1, 3, 5, 6], -1.0, 1.0)).unwrap();
    let w = store.add("w", uniform(&mut rng, &[3, 2, 5, 5], -0.5, 0.5)).unwrap();
    let b = store.add("b", uniform(&mut rng, &[2], -0.5, 0.5)).unwrap();
    let build = move |t: &mut Tape<'_, f64>| {
        let (xv, wv, bv) = (t.param(x), t.param(w), t.param(b));
        let y = t.conv_transpose2d(xv, wv, Some(bv), 2, 2).unwrap();
        project(t, y, seed)
    };
    max_relative_error(&store, &build, &mut rng)
}

fn upsample(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", uniform(&mut rng, &[2, 3, 4, 5], -1.0, 1.0)).unwrap();
    let build = move |t: &mut Tape<'_, f64>| {
        let xv = t.param(x);
        let y = t.upsample2x(xv).unwrap();
        project(t, y, seed)
    };
    max_relative_error(&store, &build, &mut rng)
}

fn attention(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = ParamStore::new();
    let att = CrissCrossAttention::new(&mut base, "att", 8, 4, &mut rng).unwrap();
    let mut store: ParamStore<f64> = base.cast();
    // Larger value weights than at init so the aggregation path dominates.
    store.scale(att.value.weight, 10.0);
    let x = store.add("x", uniform(&mut rng, &[1, 8, 5, 6], -1.0, 1.0)).unwrap();
    let build = move |t: &mut Tape<'_, f64>| {
        let xv = t.param(x);
        let y = att.forward(t, xv).unwrap();
        project(t, y, seed)
    };
    max_relative_error(&store, &build, &mut rng)
}

fn gaussian_likelihood(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let y = store.add("y", uniform(&mut rng, &[1, 4, 3, 3], -3.0, 3.0)).unwrap();
    let s = store.add("sigma", uniform(&mut rng, &[1, 4, 3, 3], 0.3, 4.0)).unwrap();
    let build = move |t: &mut Tape<'_, f64>| {
        let (yv, sv) = (t.param(y), t.param(s));
        let p = t.gaussian_likelihood(yv, sv, 0.11).unwrap();
        t.neg_log2_sum(p).unwrap()
    };
    max_relative_error(&store, &build, &mut rng)
}

fn factorized_likelihood(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = ParamStore::new();
    let density = FactorizedDensity::new(&mut base, "fd", 3, &mut rng).unwrap();
    let mut store: ParamStore<f64> = base.cast();
    let z = store.add("z", uniform(&mut rng, &[1, 3, 3, 4], -4.0, 4.0)).unwrap();
    let build = move |t: &mut Tape<'_, f64>| {
        let zv = t.param(z);
        let p = density.likelihood(t, zv).unwrap();
        t.neg_log2_sum(p).unwrap()
    };
    max_relative_error(&store, &build, &mut rng)
}

fn ms_ssim(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = [24, 32, 48][seed as usize % 3];
    let mut store = ParamStore::<f64>::new();
    let a = uniform(&mut rng, &[1, 3, side, side], 0.2, 0.8);
    let noisy = Tensor::from_fn(a.shape(), |i| (a.data()[i] + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0));
    let x = store.add("x", a).unwrap();
    let y = store.add("y", noisy).unwrap();
    let build = move |t: &mut Tape<'_, f64>| {
        let (xv, yv) = (t.param(x), t.param(y));
        ms_ssim_var(t, xv, yv).unwrap()
    };
    max_relative_error(&store, &build, &mut rng)
}

pub fn gradient_cases() -> Vec<Case> {
    vec![
        Case { name: "conv2d", tolerance: 1e-4, run: conv },
        Case { name: "conv_transpose2d", tolerance: 1e-4, run: conv_transpose },
        Case { name: "upsample2x", tolerance: 1e-4, run: upsample },
        Case { name: "attention", tolerance: 1e-4, run: attention },
        Case { name: "gaussian_likelihood", tolerance: 1e-4, run: gaussian_likelihood },
        Case { name: "factorized_likelihood", tolerance: 1e-4, run: factorized_likelihood },
        Case { name: "ms_ssim", tolerance: 1e-3, run: ms_ssim },
    ]
}

pub const INSTANCES: u64 = 5;

use freqcodec::entropy::cdf::{CdfTable, TOTAL};
use freqcodec::rans::SymbolStream;

/// A table of `contexts` random distributions over 1..=`max_support`
/// symbols, mixing flat, peaked and heavy-tailed shapes.
pub fn random_table(rng: &mut impl Rng, contexts: usize, max_support: usize, escape: bool) -> CdfTable {
    let mut pmfs = Vec::with_capacity(contexts);
    let mut offsets = Vec::with_capacity(contexts);
    for _ in 0..contexts {
        let n = rng.gen_range(1..=max_support);
        let sharpness = [0.1, 1.0, 4.0][rng.gen_range(0..3)];
        let raw: Vec<f64> = (0..n).map(|_| (-rng.gen::<f64>().max(1e-300).ln()).powf(sharpness)).collect();
        let total: f64 = raw.iter().sum::<f64>() * if escape { 1.0 + rng.gen_range(0.0..0.01) } else { 1.0 };
        pmfs.push(raw.into_iter().map(|p| p / total).collect());
        offsets.push(rng.gen_range(-50..50));
    }
    CdfTable::from_pmfs(&pmfs, offsets, escape).expect("valid table")
}

/// Symbols drawn from the table's own quantized distributions, including
/// escaped values when the table has an escape slot.
pub fn random_stream(rng: &mut impl Rng, table: &CdfTable, len: usize) -> SymbolStream {
    let mut values = Vec::with_capacity(len);
    let mut contexts = Vec::with_capacity(len);
    for _ in 0..len {
        let c = rng.gen_range(0..table.contexts());
        let slot = rng.gen_range(0..TOTAL);
        let index = table.cdf(c).partition_point(|&v| v <= slot) - 1;
        let n = table.support(c) as i32;
        let value = if index as i32 == n {
            table.offset(c) - rng.gen_range(1..1_000_000)
        } else if index as i32 == n + 1 {
            table.offset(c) + n + rng.gen_range(0..1_000_000)
        } else {
            table.offset(c) + index as i32
        };
        values.push(value);
        contexts.push(c);
    }
    SymbolStream::new(values, contexts).unwrap()
}

/// Ideal code length from the raw CDF arrays: `−log2 f/2^16` per symbol plus
/// an Elias-gamma code of the overflow distance per escape. Values below the
/// support use slot `n`, values above it slot `n + 1`.
pub fn oracle_bits(table: &CdfTable, stream: &SymbolStream) -> f64 {
    let mut bits = 0.0;
    for (&v, &c) in stream.values.iter().zip(&stream.contexts) {
        let cdf = table.cdf(c);
        let n = table.support(c) as i64;
        let i = v as i64 - table.offset(c) as i64;
        let index = if (0..n).contains(&i) {
            i as usize
        } else if i < 0 {
            n as usize
        } else {
            n as usize + 1
        };
        if index >= n as usize {
            let d = if i < 0 { -1 - i } else { i - n };
            let mut gamma = 1.0;
            let mut m = d + 1;
            while m > 1 {
                m /= 2;
                gamma += 2.0;
            }
            bits += gamma;
        }
        bits -= ((cdf[index + 1] - cdf[index]) as f64 / TOTAL as f64).log2();
    }
    bits
}

use freqcodec::config::ModelConfig;
use freqcodec::split::Split;
use freqcodec::transform::AnalysisTransform;

fn at(t: &Tensor, c: usize, y: usize, x: usize) -> f64 {
    let [_, _, h, w] = t.dims4().unwrap();
    t.data()[(c * h + y) * w + x] as f64
}

/// Half-pixel bilinear 2× upsampling with edge clamping, sample by sample.
fn upsample_oracle(t: &Tensor, c: usize, oy: usize, ox: usize) -> f64 {
    let [_, _, h, w] = t.dims4().unwrap();
    let axis = |o: usize, len: usize| {
        let src = (o as f64 + 0.5) / 2.0 - 0.5;
        let lo = src.floor();
        let clamp = |i: f64| i.max(0.0).min((len - 1) as f64) as usize;
        (clamp(lo), clamp(lo + 1.0), src - lo)
    };
    let (y0, y1, fy) = axis(oy, h);
    let (x0, x1, fx) = axis(ox, w);
    let row = |y| at(t, c, y, x0) * (1.0 - fx) + at(t, c, y, x1) * fx;
    row(y0) * (1.0 - fy) + row(y1) * fy
}

/// Largest deviation from `y_low + u(y_mid) = C(I)` and
/// `y_mid + u(y_high) = C↓2(I)` for one random input in linear mode, where
/// `C` is the identity and `C↓2` a 2×2 mean.
pub fn pyramid_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = ([32, 48, 64][rng.gen_range(0..3)], [32, 48, 64][rng.gen_range(0..3)]);
    let cfg = ModelConfig::linear(4);
    let mut store = ParamStore::new();
    let transform = AnalysisTransform::new(&mut store, &cfg, &mut rng).unwrap();
    let mut tape = Tape::inference(&store);
    let x = tape.constant(Tensor::from_fn(&[1, 3, h, w], |_| rng.gen::<f32>()));
    let i = transform.spatial_sample(&mut tape, x).unwrap();
    let y = transform.analyze(&mut tape, x).unwrap();
    let i = tape.value(i).clone();
    let [low, mid, high] = [Split::Low, Split::Mid, Split::High].map(|s| tape.value(y[s]).clone());
    let [_, c, fh, fw] = i.dims4().unwrap();
    let mut worst: f64 = 0.0;
    for ch in 0..c {
        for yy in 0..fh {
            for xx in 0..fw {
                let lhs = at(&low, ch, yy, xx) + upsample_oracle(&mid, ch, yy, xx);
                worst = worst.max((lhs - at(&i, ch, yy, xx)).abs());
            }
        }
        for yy in 0..fh / 2 {
            for xx in 0..fw / 2 {
                let pooled = (at(&i, ch, 2 * yy, 2 * xx)
                    + at(&i, ch, 2 * yy, 2 * xx + 1)
                    + at(&i, ch, 2 * yy + 1, 2 * xx)
                    + at(&i, ch, 2 * yy + 1, 2 * xx + 1))
                    / 4.0;
                let lhs = at(&mid, ch, yy, xx) + upsample_oracle(&high, ch, yy, xx);
                worst = worst.max((lhs - pooled).abs());
            }
        }
    }
    worst
}
