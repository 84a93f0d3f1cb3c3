//! Plain-text `key=value` configuration files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Activation;

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key=value", n + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::InvalidArgument(format!("line {}: duplicate key `{}`", n + 1, k.trim())));
        }
    }
    Ok(out)
}

pub(crate) fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{value}` for `{key}`")))
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Pyramid depth; the pyramid has `levels + 1` bands.
    pub levels: usize,
    pub base_channels: usize,
    pub latent_channels: usize,
    pub hyper_channels: usize,
    pub attention_reduction: usize,
    pub activation: Activation,
    /// Fixed identity/averaging kernels in the analysis path, no activations.
    pub linear: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            levels: 2,
            base_channels: 32,
            latent_channels: 32,
            hyper_channels: 16,
            attention_reduction: 8,
            activation: Activation::Relu,
            linear: false,
        }
    }

    pub fn full_scale() -> Self {
        Self { base_channels: 128, latent_channels: 192, hyper_channels: 128, ..Self::desk() }
    }

    /// Linear-mode analysis with `channels` everywhere.
    pub fn linear(channels: usize) -> Self {
        Self {
            base_channels: channels,
            latent_channels: channels,
            attention_reduction: if channels % 8 == 0 { 8 } else { 1 },
            activation: Activation::Identity,
            linear: true,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels != 2 {
            return Err(Error::InvalidArgument(format!(
                "only a 3-band pyramid (levels = 2) is supported, got levels = {}",
                self.levels
            )));
        }
        let widths = [self.base_channels, self.latent_channels, self.hyper_channels, self.attention_reduction];
        if widths.contains(&0) {
            return Err(Error::InvalidArgument("channel counts and reduction must be at least 1".into()));
        }
        if self.base_channels % self.attention_reduction != 0 {
            return Err(Error::InvalidArgument(format!(
                "attention_reduction {} does not divide decoder width {}",
                self.attention_reduction, self.base_channels
            )));
        }
        if self.linear && self.latent_channels != self.base_channels {
            return Err(Error::InvalidArgument("linear mode needs latent_channels == base_channels".into()));
        }
        Ok(())
    }

    /// Canonical `key=value` serialization; the model id hashes this text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "levels={}", self.levels);
        let _ = writeln!(s, "base_channels={}", self.base_channels);
        let _ = writeln!(s, "latent_channels={}", self.latent_channels);
        let _ = writeln!(s, "hyper_channels={}", self.hyper_channels);
        let _ = writeln!(s, "attention_reduction={}", self.attention_reduction);
        let _ = writeln!(s, "activation={}", self.activation.name());
        let _ = writeln!(s, "linear={}", self.linear);
        s
    }

    /// Parses the keys above; missing keys keep their desk defaults. Keys
    /// belonging to other sections (e.g. training) are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::desk();
        for (k, v) in pairs {
            match k.as_str() {
                "levels" | "k" => c.levels = parse_value(k, v)?,
                "base_channels" => c.base_channels = parse_value(k, v)?,
                "latent_channels" => c.latent_channels = parse_value(k, v)?,
                "hyper_channels" => c.hyper_channels = parse_value(k, v)?,
                "attention_reduction" => c.attention_reduction = parse_value(k, v)?,
                "activation" => c.activation = Activation::parse(v)?,
                "linear" => c.linear = parse_value(k, v)?,
                _ => {}
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn model_id(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}
