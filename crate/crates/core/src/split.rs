//! Frequency split identifiers and masks.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// One of the three pyramid bands. `High` is the coarsest band and `Low` the
/// finest residual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    High,
    Mid,
    Low,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::High, Split::Mid, Split::Low];

    pub fn name(self) -> &'static str {
        match self {
            Split::High => "high",
            Split::Mid => "mid",
            Split::Low => "low",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "high" => Ok(Split::High),
            "mid" => Ok(Split::Mid),
            "low" => Ok(Split::Low),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}` (expected low, mid or high)"))),
        }
    }

    /// Container flag bit.
    pub fn flag(self) -> u8 {
        match self {
            Split::Low => 1,
            Split::Mid => 2,
            Split::High => 4,
        }
    }

    /// Downsampling factor of the band relative to the spatially sampled feature.
    pub fn scale(self) -> usize {
        match self {
            Split::High => 4,
            Split::Mid => 2,
            Split::Low => 1,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One value per split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PerSplit<V>(pub [V; 3]);

impl<V> PerSplit<V> {
    pub fn from_fn(mut f: impl FnMut(Split) -> V) -> Self {
        Self(Split::ALL.map(&mut f))
    }

    pub fn try_from_fn<E>(mut f: impl FnMut(Split) -> std::result::Result<V, E>) -> std::result::Result<Self, E> {
        let [a, b, c] = Split::ALL;
        Ok(Self([f(a)?, f(b)?, f(c)?]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Split, &V)> {
        Split::ALL.into_iter().zip(self.0.iter())
    }

    pub fn map<U>(&self, mut f: impl FnMut(Split, &V) -> U) -> PerSplit<U> {
        PerSplit::from_fn(|s| f(s, &self[s]))
    }
}

impl<V> Index<Split> for PerSplit<V> {
    type Output = V;
    fn index(&self, s: Split) -> &V {
        &self.0[s.index()]
    }
}

impl<V> IndexMut<Split> for PerSplit<V> {
    fn index_mut(&mut self, s: Split) -> &mut V {
        &mut self.0[s.index()]
    }
}

/// Set of enabled splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SplitMask {
    bits: u8,
}

impl SplitMask {
    pub const FULL: SplitMask = SplitMask { bits: 7 };

    pub fn new(splits: &[Split]) -> Result<Self> {
        Self::from_flags(splits.iter().fold(0, |acc, s| acc | s.flag()))
    }

    pub fn from_flags(bits: u8) -> Result<Self> {
        if bits == 0 || bits > 7 {
            return Err(Error::InvalidArgument(format!("invalid split mask {bits:#05b}: at least one split required")));
        }
        Ok(Self { bits })
    }

    /// Parses a comma-separated list such as `low,mid`.
    pub fn parse(s: &str) -> Result<Self> {
        let splits = s.split(',').filter(|p| !p.trim().is_empty()).map(Split::parse).collect::<Result<Vec<_>>>()?;
        Self::new(&splits)
    }

    pub fn flags(self) -> u8 {
        self.bits
    }

    pub fn contains(self, s: Split) -> bool {
        self.bits & s.flag() != 0
    }

    pub fn is_subset_of(self, other: SplitMask) -> bool {
        self.bits & !other.bits == 0
    }

    pub fn splits(self) -> impl Iterator<Item = Split> {
        Split::ALL.into_iter().filter(move |&s| self.contains(s))
    }

    /// Every non-empty mask.
    pub fn all_masks() -> impl Iterator<Item = SplitMask> {
        (1..=7).map(|bits| SplitMask { bits })
    }
}

impl fmt::Display for SplitMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [Split::Low, Split::Mid, Split::High]
            .into_iter()
            .filter(|&s| self.contains(s))
            .map(Split::name)
            .collect();
        f.write_str(&names.join(","))
    }
}
