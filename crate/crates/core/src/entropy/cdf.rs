//! Integer cumulative tables for the range coder.

use super::factorized::Cumulative;
use super::gaussian::{std_normal_cdf, GaussianConditional};
use crate::error::{Error, Result};
use crate::nn::checkpoint::Record;

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;
pub const TAIL_MASS: f64 = 1e-9;
/// Largest number of in-range symbols a context may have.
pub const MAX_SUPPORT: usize = 1 << 15;

/// Per-context quantized CDFs.
///
/// Context `c` covers the values `offset[c] .. offset[c] + n` where `n` is
/// the number of regular symbols. With escapes, index `n` flags values below
/// the support and `n + 1` values above it; the distance past the support edge
/// follows as an Elias-gamma code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cdfs: Vec<Vec<u32>>,
    offsets: Vec<i32>,
    escape: bool,
}

/// Where a value lands in a context.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Symbol(usize),
    Escape(usize),
}

impl CdfTable {
    /// Validates and wraps raw tables. Each CDF starts at 0, ends at 2^16 and
    /// is strictly increasing.
    pub fn new(cdfs: Vec<Vec<u32>>, offsets: Vec<i32>, escape: bool) -> Result<Self> {
        if cdfs.is_empty() || cdfs.len() != offsets.len() {
            return Err(Error::InvalidArgument(format!(
                "{} cdfs for {} offsets",
                cdfs.len(),
                offsets.len()
            )));
        }
        for (c, cdf) in cdfs.iter().enumerate() {
            let min_len = if escape { 4 } else { 2 };
            if cdf.len() < min_len {
                return Err(Error::InvalidArgument(format!("context {c}: cdf too short")));
            }
            if cdf[0] != 0 || *cdf.last().unwrap() != TOTAL {
                return Err(Error::InvalidArgument(format!("context {c}: cdf must run from 0 to {TOTAL}")));
            }
            if cdf.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidArgument(format!("context {c}: zero-frequency symbol")));
            }
            if cdf.len() - 1 - escape_slots(escape) > MAX_SUPPORT {
                return Err(Error::InvalidArgument(format!("context {c}: support exceeds {MAX_SUPPORT}")));
            }
        }
        Ok(Self { cdfs, offsets, escape })
    }

    /// Quantizes probability vectors. With `escape`, two extra slots are
    /// appended, each carrying half the leftover mass.
    pub fn from_pmfs(pmfs: &[Vec<f64>], offsets: Vec<i32>, escape: bool) -> Result<Self> {
        let mut cdfs = Vec::with_capacity(pmfs.len());
        for (c, pmf) in pmfs.iter().enumerate() {
            if pmf.is_empty() || pmf.len() > MAX_SUPPORT {
                return Err(Error::InvalidArgument(format!(
                    "context {c}: support of {} symbols (allowed 1..={MAX_SUPPORT})",
                    pmf.len()
                )));
            }
            let mut probs = pmf.clone();
            if escape {
                let mass: f64 = pmf.iter().sum();
                let tail = (1.0 - mass).max(0.0) / 2.0;
                probs.extend([tail, tail]);
            }
            cdfs.push(quantize_pmf(&probs)?);
        }
        Self::new(cdfs, offsets, escape)
    }

    /// One table per channel of a factorized density, covering all but
    /// [`TAIL_MASS`] of each channel's mass.
    pub fn factorized(cum: &Cumulative, channels: usize) -> Result<Self> {
        let t = TAIL_MASS / 2.0;
        let (lo_logit, hi_logit) = ((t / (1.0 - t)).ln(), ((1.0 - t) / t).ln());
        let mut pmfs = Vec::with_capacity(channels);
        let mut offsets = Vec::with_capacity(channels);
        for c in 0..channels {
            let f = |x: f64| cum.logit(c, x);
            let lo = quantile(&f, lo_logit)?.floor();
            let hi = quantile(&f, hi_logit)?.ceil();
            let n = (hi - lo) as usize + 1;
            if n > MAX_SUPPORT {
                return Err(Error::InvalidArgument(format!(
                    "channel {c}: support of {n} symbols exceeds {MAX_SUPPORT}"
                )));
            }
            pmfs.push((0..n).map(|i| cum.bin_mass(c, lo + i as f64)).collect());
            offsets.push(lo as i32);
        }
        Self::from_pmfs(&pmfs, offsets, true)
    }

    /// One table per entry of the scale table.
    pub fn gaussian(model: &GaussianConditional) -> Result<Self> {
        let t = TAIL_MASS / 2.0;
        let z = quantile(&|x| -std_normal_cdf(-x), -t)?;
        let mut pmfs = Vec::new();
        let mut offsets = Vec::new();
        for &s in model.scale_table() {
            let half = (s * z).ceil() as i64;
            let n = 2 * half as usize + 1;
            if n > MAX_SUPPORT {
                return Err(Error::InvalidArgument(format!("scale {s}: support of {n} symbols exceeds {MAX_SUPPORT}")));
            }
            pmfs.push((-half..=half).map(|v| super::gaussian::bin_mass(v as f64, s)).collect());
            offsets.push(-half as i32);
        }
        Self::from_pmfs(&pmfs, offsets, true)
    }

    pub fn contexts(&self) -> usize {
        self.cdfs.len()
    }

    pub fn has_escape(&self) -> bool {
        self.escape
    }

    pub fn cdf(&self, context: usize) -> &[u32] {
        &self.cdfs[context]
    }

    pub fn offset(&self, context: usize) -> i32 {
        self.offsets[context]
    }

    /// Number of regular (non-escape) symbols.
    pub fn support(&self, context: usize) -> usize {
        self.cdfs[context].len() - 1 - escape_slots(self.escape)
    }

    /// `(start, freq)` of symbol `index`.
    pub fn range(&self, context: usize, index: usize) -> (u32, u32) {
        let cdf = &self.cdfs[context];
        (cdf[index], cdf[index + 1] - cdf[index])
    }

    /// Quantized probability of `value` (escape mass for out-of-range values).
    pub fn probability(&self, context: usize, value: i32) -> Option<f64> {
        let index = match self.slot(context, value)? {
            Slot::Symbol(i) | Slot::Escape(i) => i,
        };
        Some(self.range(context, index).1 as f64 / TOTAL as f64)
    }

    /// Maps a value to its symbol, or `None` if it is out of range and the
    /// table has no escape.
    pub fn slot(&self, context: usize, value: i32) -> Option<Slot> {
        let index = value as i64 - self.offsets[context] as i64;
        let n = self.support(context);
        if (0..n as i64).contains(&index) {
            Some(Slot::Symbol(index as usize))
        } else if self.escape {
            Some(Slot::Escape(if index < 0 { n } else { n + 1 }))
        } else {
            None
        }
    }

    /// Symbol whose interval contains `slot` in `[0, 2^16)`.
    pub fn lookup(&self, context: usize, slot: u32) -> usize {
        self.cdfs[context].partition_point(|&c| c <= slot) - 1
    }

    /// Checkpoint records under `cdf.<prefix>.*`.
    pub fn to_records(&self, prefix: &str) -> Vec<Record> {
        let lengths: Vec<u16> = self.cdfs.iter().map(|c| (c.len() - 1) as u16).collect();
        let flat: Vec<u16> = self.cdfs.iter().flat_map(|c| c[..c.len() - 1].iter().map(|&v| v as u16)).collect();
        let offsets: Vec<u16> = self.offsets.iter().map(|&o| o as i16 as u16).collect();
        vec![
            Record::u16(format!("cdf.{prefix}.lengths"), &[lengths.len()], lengths),
            Record::u16(format!("cdf.{prefix}.offsets"), &[offsets.len()], offsets),
            Record::u16(format!("cdf.{prefix}.escape"), &[1], vec![escape_slots(self.escape) as u16]),
            Record::u16(format!("cdf.{prefix}.values"), &[flat.len()], flat),
        ]
    }

    pub fn from_records(records: &[Record], prefix: &str) -> Result<Self> {
        let get = |name: &str| -> Result<&[u16]> {
            let full = format!("cdf.{prefix}.{name}");
            match records.iter().find(|r| r.name == full).map(|r| &r.payload) {
                Some(crate::nn::checkpoint::Payload::U16(v)) => Ok(v),
                _ => Err(Error::Format(format!("missing record `{full}`"))),
            }
        };
        let (lengths, offsets, escape, flat) = (get("lengths")?, get("offsets")?, get("escape")?, get("values")?);
        let mut cdfs = Vec::with_capacity(lengths.len());
        let mut pos = 0;
        for &len in lengths {
            let len = len as usize;
            let chunk = flat.get(pos..pos + len).ok_or_else(|| Error::Format("cdf values truncated".into()))?;
            let mut cdf: Vec<u32> = chunk.iter().map(|&v| v as u32).collect();
            cdf.push(TOTAL);
            cdfs.push(cdf);
            pos += len;
        }
        if pos != flat.len() || escape.len() != 1 {
            return Err(Error::Format(format!("inconsistent cdf records for `{prefix}`")));
        }
        let escape = match escape[0] {
            0 => false,
            2 => true,
            n => return Err(Error::Format(format!("`{prefix}`: unsupported escape layout {n}"))),
        };
        let offsets = offsets.iter().map(|&o| o as i16 as i32).collect();
        Self::new(cdfs, offsets, escape).map_err(|e| Error::Format(e.to_string()))
    }
}

fn escape_slots(escape: bool) -> usize {
    if escape {
        2
    } else {
        0
    }
}

/// Bisection for `f(x) = target` with `f` non-decreasing.
fn quantile(f: &dyn Fn(f64) -> f64, target: f64) -> Result<f64> {
    let limit = MAX_SUPPORT as f64;
    let (mut lo, mut hi) = (-limit, limit);
    if !(f(lo) <= target && f(hi) >= target) {
        return Err(Error::InvalidArgument(format!(
            "distribution support exceeds ±{limit}"
        )));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Rounds probabilities to frequencies summing to 2^16, every one at least 1.
pub fn quantize_pmf(probs: &[f64]) -> Result<Vec<u32>> {
    let n = probs.len();
    if n == 0 || n > TOTAL as usize {
        return Err(Error::InvalidArgument(format!("cannot quantize {n} symbols")));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidArgument("probabilities must be finite and non-negative".into()));
    }
    let sum: f64 = probs.iter().sum();
    let scale = if sum > 0.0 { TOTAL as f64 / sum } else { 0.0 };
    let mut freq: Vec<i64> = probs.iter().map(|p| ((p * scale).round() as i64).max(1)).collect();
    let mut diff = TOTAL as i64 - freq.iter().sum::<i64>();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
    while diff != 0 {
        let mut changed = false;
        for &i in &order {
            if diff > 0 {
                freq[i] += 1;
                diff -= 1;
                changed = true;
            } else if diff < 0 && freq[i] > 1 {
                freq[i] -= 1;
                diff += 1;
                changed = true;
            }
            if diff == 0 {
                break;
            }
        }
        debug_assert!(changed);
    }
    let mut cdf = Vec::with_capacity(n + 1);
    let mut acc = 0u32;
    cdf.push(0);
    for f in freq {
        acc += f as u32;
        cdf.push(acc);
    }
    Ok(cdf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::FactorizedDensity;
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check_table(t: &CdfTable) {
        for c in 0..t.contexts() {
            let cdf = t.cdf(c);
            assert_eq!(cdf[0], 0);
            assert_eq!(*cdf.last().unwrap(), TOTAL);
            assert!(cdf.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn gaussian_tables_are_valid() {
        let g = GaussianConditional::default();
        let t = CdfTable::gaussian(&g).unwrap();
        assert_eq!(t.contexts(), 64);
        check_table(&t);
        let c = g.scale_index(1.0);
        let s = g.scale_table()[c];
        let p0 = t.probability(c, 0).unwrap();
        let want = std_normal_cdf(0.5 / s) - std_normal_cdf(-0.5 / s);
        assert!((p0 - want).abs() < 1e-3);
    }

    #[test]
    fn unit_scale_zero_symbol() {
        let g = GaussianConditional::new(1.0, 2.0, 2);
        let t = CdfTable::gaussian(&g).unwrap();
        assert!((t.probability(0, 0).unwrap() - 0.382_925).abs() < 1e-3);
        assert_eq!(t.slot(0, 1000), Some(Slot::Escape(t.support(0) + 1)));
        assert_eq!(t.slot(0, -1000), Some(Slot::Escape(t.support(0))));
    }

    #[test]
    fn factorized_tables_are_valid() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = FactorizedDensity::new(&mut store, "z", 4, &mut rng).unwrap();
        let t = CdfTable::factorized(&d.cumulative(&store), 4).unwrap();
        check_table(&t);
        assert!(t.has_escape());
    }

    #[test]
    fn quantization_keeps_every_symbol() {
        let mut probs = vec![1e-12; 1000];
        probs[0] = 1.0;
        let cdf = quantize_pmf(&probs).unwrap();
        assert_eq!(*cdf.last().unwrap(), TOTAL);
        assert!(cdf.windows(2).all(|w| w[1] > w[0]));
        assert!(quantize_pmf(&vec![1.0; MAX_SUPPORT * 2 + 1]).is_err());
    }

    #[test]
    fn rejects_oversized_support() {
        let pmf = vec![1.0 / 40000.0; 40000];
        assert!(CdfTable::from_pmfs(&[pmf], vec![0], false).is_err());
        let wide = GaussianConditional::new(0.11, 20000.0, 4);
        assert!(CdfTable::gaussian(&wide).is_err());
    }

    #[test]
    fn record_round_trip() {
        let t = CdfTable::gaussian(&GaussianConditional::default()).unwrap();
        let back = CdfTable::from_records(&t.to_records("y"), "y").unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn raw_tables_validate() {
        assert!(CdfTable::new(vec![vec![0, 10, 10, TOTAL]], vec![0], false).is_err());
        assert!(CdfTable::new(vec![vec![0, TOTAL - 1]], vec![0], false).is_err());
        let t = CdfTable::new(vec![vec![0, TOTAL]], vec![5], false).unwrap();
        assert_eq!(t.slot(0, 5), Some(Slot::Symbol(0)));
        assert_eq!(t.slot(0, 6), None);
        assert_eq!(t.lookup(0, 65535), 0);
    }
}
