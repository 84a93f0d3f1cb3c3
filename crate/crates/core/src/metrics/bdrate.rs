use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Rate-distortion points of one codec, `bpp` strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    pub label: String,
    /// Quality metric name, e.g. `psnr` or `msssim_db`.
    pub metric: String,
    pub points: Vec<(f64, f64)>,
}

impl RdCurve {
    pub fn new(label: impl Into<String>, metric: impl Into<String>, points: Vec<(f64, f64)>) -> Result<Self> {
        if points.iter().any(|&(r, q)| !(r > 0.0) || !r.is_finite() || !q.is_finite()) {
            return Err(Error::InvalidArgument("RD points need positive finite rates and finite qualities".into()));
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidArgument("bpp must be strictly increasing".into()));
        }
        Ok(Self { label: label.into(), metric: metric.into(), points })
    }

    /// `bpp,<metric>` header followed by one row per point.
    pub fn to_csv(&self) -> String {
        let mut s = format!("bpp,{}\n", self.metric);
        for (r, q) in &self.points {
            s.push_str(&format!("{r},{q}\n"));
        }
        s
    }

    pub fn from_csv(label: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::Format("empty RD curve".into()))?;
        let metric = header
            .split(',')
            .nth(1)
            .ok_or_else(|| Error::Format(format!("RD curve header `{header}` needs two columns")))?
            .trim()
            .to_string();
        let mut points = Vec::new();
        for (i, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let parse = |s: Option<&&str>| {
                s.and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::Format(format!("RD curve row {}: `{line}`", i + 1)))
            };
            points.push((parse(cols.first())?, parse(cols.get(1))?));
        }
        Self::new(label, metric, points).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Least-squares cubic coefficients `c0 + c1 q + c2 q² + c3 q³` of `ln(rate)`.
fn fit_log_rate(curve: &RdCurve) -> Result<[f64; 4]> {
    let n = curve.points.len();
    let a = DMatrix::from_fn(n, 4, |i, j| curve.points[i].1.powi(j as i32));
    let b = DVector::from_iterator(n, curve.points.iter().map(|p| p.0.ln()));
    let svd = a.svd(true, true);
    let c = svd
        .solve(&b, 1e-12)
        .map_err(|e| Error::InvalidArgument(format!("cubic fit failed for `{}`: {e}", curve.label)))?;
    Ok([c[0], c[1], c[2], c[3]])
}

fn integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let prim = |q: f64| c[0] * q + c[1] * q * q / 2.0 + c[2] * q.powi(3) / 3.0 + c[3] * q.powi(4) / 4.0;
    prim(hi) - prim(lo)
}

fn quality_range(curve: &RdCurve) -> (f64, f64) {
    curve.points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)))
}

/// Bjøntegaard delta rate of `test` against `anchor` in percent; negative
/// means `test` needs fewer bits for the same quality.
pub fn bd_rate(test: &RdCurve, anchor: &RdCurve) -> Result<f64> {
    for c in [test, anchor] {
        if c.points.len() < 4 {
            return Err(Error::InvalidArgument(format!("curve `{}` has {} points, need at least 4", c.label, c.points.len())));
        }
    }
    let (tl, th) = quality_range(test);
    let (al, ah) = quality_range(anchor);
    let (lo, hi) = (tl.max(al), th.min(ah));
    if !(hi > lo) {
        return Err(Error::InvalidArgument("curves have no overlapping quality range".into()));
    }
    let ct = fit_log_rate(test)?;
    let ca = fit_log_rate(anchor)?;
    let avg = (integral(&ct, lo, hi) - integral(&ca, lo, hi)) / (hi - lo);
    Ok((avg.exp() - 1.0) * 100.0)
}
