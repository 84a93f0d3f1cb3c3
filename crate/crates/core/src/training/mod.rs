//! Rate-distortion training.

pub mod data;
pub mod loss;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use data::{synthetic_texture, Dataset};
pub use loss::{distortion, rd_loss, rd_loss_var, Metric};

use crate::autodiff::Tape;
use crate::config::{parse_pairs, parse_value};
use crate::entropy::QuantMode;
use crate::error::{Error, Result};
use crate::model::Codec;
use crate::nn::{AdamState, ParamStore};
use crate::split::{PerSplit, Split, SplitMask};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub metric: Metric,
    pub batch_size: usize,
    pub crop: usize,
    pub lr: f64,
    /// Evaluations without improvement before the learning rate is halved.
    pub patience: usize,
    /// Minimum eval-loss decrease that counts as improvement.
    pub threshold: f64,
    pub eval_every: usize,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            metric: Metric::Mse,
            batch_size: 8,
            crop: 64,
            lr: 1e-4,
            patience: 5,
            threshold: 1e-4,
            eval_every: 100,
            max_iterations: 50_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings that converge within a couple of thousand iterations on one core.
    pub fn desk() -> Self {
        Self { lr: 1e-3, max_iterations: 2000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.crop == 0 || self.crop % 64 != 0 {
            return Err(Error::InvalidArgument(format!("crop must be a positive multiple of 64, got {}", self.crop)));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidArgument("batch_size and eval_every must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lambda={}", self.lambda);
        let _ = writeln!(s, "metric={}", self.metric.name());
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "crop={}", self.crop);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "patience={}", self.patience);
        let _ = writeln!(s, "threshold={}", self.threshold);
        let _ = writeln!(s, "eval_every={}", self.eval_every);
        let _ = writeln!(s, "max_iterations={}", self.max_iterations);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    /// Training keys over `base`; unknown keys are ignored.
    pub fn from_pairs(pairs: &BTreeMap<String, String>, base: Self) -> Result<Self> {
        let mut c = base;
        for (k, v) in pairs {
            match k.as_str() {
                "lambda" => c.lambda = parse_value(k, v)?,
                "metric" => c.metric = Metric::parse(v)?,
                "batch_size" => c.batch_size = parse_value(k, v)?,
                "crop" => c.crop = parse_value(k, v)?,
                "lr" => c.lr = parse_value(k, v)?,
                "patience" => c.patience = parse_value(k, v)?,
                "threshold" => c.threshold = parse_value(k, v)?,
                "eval_every" => c.eval_every = parse_value(k, v)?,
                "max_iterations" => c.max_iterations = parse_value(k, v)?,
                "seed" => c.seed = parse_value(k, v)?,
                _ => {}
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?, Self::default())
    }
}

/// Rate and distortion measured at one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct RdReport {
    pub iteration: usize,
    pub latent_bits: PerSplit<f64>,
    pub hyper_bits: PerSplit<f64>,
    pub bpp: f64,
    /// Distortion on the loss scale.
    pub distortion: f64,
    pub loss: f64,
    pub lr: f64,
}

impl RdReport {
    pub const CSV_HEADER: &'static str = "iteration,bpp,distortion,loss,lr";

    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.6},{:.6},{}", self.iteration, self.bpp, self.distortion, self.loss, self.lr)
    }
}

pub fn reports_to_csv(reports: &[RdReport]) -> String {
    let mut s = format!("{}\n", RdReport::CSV_HEADER);
    for r in reports {
        s += &r.csv_row();
        s.push('\n');
    }
    s
}

/// Round-mode rate and distortion over `images` (each `[1, 3, H, W]`).
pub fn evaluate(codec: &Codec, images: &[Tensor], cfg: &TrainConfig, iteration: usize, lr: f64) -> Result<RdReport> {
    let mut latent = [0.0; 3];
    let mut hyper = [0.0; 3];
    let (mut dist, mut pixels) = (0.0, 0usize);
    for x in images {
        let mut tape = Tape::inference(codec.params());
        let xv = tape.constant(x.clone());
        let out = codec.forward(&mut tape, xv, QuantMode::Round, None, SplitMask::FULL)?;
        for (i, s) in Split::ALL.into_iter().enumerate() {
            latent[i] += tape.value(out.y_bits[s]).item() as f64;
            hyper[i] += tape.value(out.z_bits[s]).item() as f64;
        }
        let d = distortion(&mut tape, xv, out.x_hat, cfg.metric)?;
        dist += tape.value(d).item() as f64 * cfg.metric.loss_scale();
        let [n, _, h, w] = x.dims4()?;
        pixels += n * h * w;
    }
    let distortion = dist / images.len() as f64;
    let loss = rd_loss(&latent, &hyper, distortion, cfg.lambda, pixels)?;
    let bpp = (latent.iter().sum::<f64>() + hyper.iter().sum::<f64>()) / pixels as f64;
    Ok(RdReport {
        iteration,
        latent_bits: PerSplit(latent),
        hyper_bits: PerSplit(hyper),
        bpp,
        distortion,
        loss,
        lr,
    })
}

/// What happened during [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub reports: Vec<RdReport>,
    /// Per-iteration training loss (noise mode).
    pub train_losses: Vec<f64>,
    pub final_lr: f64,
}

/// Optional side effects of a run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Written atomically after every evaluation.
    pub checkpoint: Option<PathBuf>,
    pub on_report: Option<Box<dyn FnMut(&RdReport) + 'a>>,
}

/// Adam on the noise-mode RD loss, halving the learning rate whenever the
/// evaluation loss fails to improve by `threshold` for `patience` evaluations.
///
/// A non-finite loss or gradient restores the parameters of the last
/// evaluation (and its checkpoint) and returns [`Error::Diverged`].
pub fn train(codec: &mut Codec, data: &Dataset, cfg: &TrainConfig, mut hooks: TrainHooks<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.eval.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one training and one evaluation image".into()));
    }
    let eval_set: Vec<Tensor> = data.eval.iter().map(|img| img.pad_to_multiple(64).to_tensor()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(codec.params(), cfg.lr);
    let mut reports = Vec::new();
    let mut train_losses = Vec::with_capacity(cfg.max_iterations);
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut good: ParamStore = codec.params().clone();

    let mut report = |codec: &Codec, it: usize, lr: f64, reports: &mut Vec<RdReport>| -> Result<f64> {
        let r = evaluate(codec, &eval_set, cfg, it, lr)?;
        if let Some(f) = hooks.on_report.as_mut() {
            f(&r);
        }
        let loss = r.loss;
        reports.push(r);
        Ok(loss)
    };

    let first = report(codec, 0, adam.lr, &mut reports)?;
    best = best.min(first);
    for it in 1..=cfg.max_iterations {
        let batch = data.batch(&mut rng, cfg.batch_size, cfg.crop)?;
        let n_pixels = cfg.batch_size * cfg.crop * cfg.crop;
        let step = {
            let mut tape = Tape::with_params(codec.params());
            let x = tape.constant(batch);
            let out = codec.forward(&mut tape, x, QuantMode::Noise, Some(&mut rng), SplitMask::FULL)?;
            let bits: Vec<_> = Split::ALL.iter().flat_map(|&s| [out.y_bits[s], out.z_bits[s]]).collect();
            let d = distortion(&mut tape, x, out.x_hat, cfg.metric)?;
            let (loss, _, _) = rd_loss_var(&mut tape, &bits, d, cfg.metric, cfg.lambda, n_pixels)?;
            let value = tape.value(loss).item() as f64;
            if value.is_finite() {
                tape.backward(loss)?;
                Some((value, tape.param_grads()))
            } else {
                None
            }
        };
        let diverged = match step {
            Some((value, grads)) => match adam.step(codec.params_mut(), &grads) {
                Ok(()) => {
                    train_losses.push(value);
                    false
                }
                Err(Error::NonFiniteGradient(_)) => true,
                Err(e) => return Err(e),
            },
            None => true,
        };
        if diverged {
            *codec.params_mut() = good;
            return Err(Error::Diverged { iteration: it });
        }
        if it % cfg.eval_every == 0 || it == cfg.max_iterations {
            let loss = report(codec, it, adam.lr, &mut reports)?;
            if !loss.is_finite() {
                *codec.params_mut() = good;
                return Err(Error::Diverged { iteration: it });
            }
            if loss < best - cfg.threshold {
                best = loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    adam.lr /= 2.0;
                    stale = 0;
                }
            }
            good = codec.params().clone();
            if let Some(path) = &hooks.checkpoint {
                codec.save(path)?;
            }
        }
    }
    Ok(TrainOutcome { reports, train_losses, final_lr: adam.lr })
}

/// Mean over a trailing window of `window` values ending at each position.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Saves the model next to a text dump of the training configuration.
pub fn save_run(codec: &Codec, cfg: &TrainConfig, reports: &[RdReport], out: &Path) -> Result<()> {
    codec.save(out)?;
    std::fs::write(out.with_extension("train.txt"), cfg.to_text())?;
    std::fs::write(out.with_extension("csv"), reports_to_csv(reports))?;
    Ok(())
}
