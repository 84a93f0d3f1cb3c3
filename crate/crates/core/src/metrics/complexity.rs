//! Parameter and multiply-accumulate counting over a plain-text network
//! description.
//!
//! One layer per line, `#` starts a comment:
//!
//! ```text
//! input 64 16 16            # channels height width
//! conv 64 8 1 1             # in out kernel stride
//! tconv 8 8 5 2             # transposed, output = stride × input
//! attention 64 8            # channels reduction
//! upsample                  # bilinear ×2, no parameters
//! relu | identity | abs | exp
//! ```
//!
//! MACs count conv-type layers only: `k²·cin + 1` per output element, the
//! extra one for the bias. Attention contributes its three 1×1 projections.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::{attention_cost, Branch};
use crate::split::Split;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub kind: String,
    /// `[C, H, W]` after the layer.
    pub output: [usize; 3],
    pub params: usize,
    pub macs: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Cost {
    pub params: usize,
    pub macs: usize,
    pub layers: Vec<LayerCost>,
}

fn nums(line: usize, args: &[&str], n: usize) -> Result<Vec<usize>> {
    if args.len() != n {
        return Err(Error::InvalidArgument(format!("line {line}: expected {n} numbers, got {}", args.len())));
    }
    args.iter()
        .map(|a| a.parse::<usize>().map_err(|_| Error::InvalidArgument(format!("line {line}: bad number `{a}`"))))
        .collect()
}

/// Counts `(params, macs)` of a described network.
pub fn count_params_macs(description: &str) -> Result<Cost> {
    let mut shape: Option<[usize; 3]> = None;
    let mut cost = Cost::default();
    for (i, raw) in description.lines().enumerate() {
        let line = i + 1;
        let text = raw.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let mut parts = text.split_whitespace();
        let kind = parts.next().expect("non-empty line");
        let args: Vec<&str> = parts.collect();
        if kind == "input" {
            let v = nums(line, &args, 3)?;
            shape = Some([v[0], v[1], v[2]]);
            continue;
        }
        let [c, h, w] = shape.ok_or_else(|| Error::InvalidArgument(format!("line {line}: `{kind}` before `input`")))?;
        let (output, params, macs) = match kind {
            "conv" | "tconv" => {
                let v = nums(line, &args, 4)?;
                let (cin, cout, k, s) = (v[0], v[1], v[2], v[3]);
                if cin != c {
                    return Err(Error::Shape(format!("line {line}: layer expects {cin} channels, input has {c}")));
                }
                if s == 0 {
                    return Err(Error::InvalidArgument(format!("line {line}: stride must be positive")));
                }
                let (oh, ow) = if kind == "conv" { (h.div_ceil(s), w.div_ceil(s)) } else { (h * s, w * s) };
                let params = cout * cin * k * k + cout;
                ([cout, oh, ow], params, cout * oh * ow * (cin * k * k + 1))
            }
            "attention" => {
                let v = nums(line, &args, 2)?;
                if v[0] != c {
                    return Err(Error::Shape(format!("line {line}: attention over {} channels, input has {c}", v[0])));
                }
                if v[1] == 0 || c % v[1] != 0 {
                    return Err(Error::InvalidArgument(format!("line {line}: reduction {} must divide {c}", v[1])));
                }
                let (p, m) = attention_cost(c, v[1], h, w);
                ([c, h, w], p, m)
            }
            "upsample" => ([c, h * 2, w * 2], 0, 0),
            "relu" | "identity" | "abs" | "exp" => ([c, h, w], 0, 0),
            other => return Err(Error::UnsupportedLayer(other.to_string())),
        };
        cost.params += params;
        cost.macs += macs;
        cost.layers.push(LayerCost { kind: kind.to_string(), output, params, macs });
        shape = Some(output);
    }
    if shape.is_none() {
        return Err(Error::InvalidArgument("description has no `input` line".into()));
    }
    Ok(cost)
}

/// The attention module alone on a `[channels, h, w]` input.
pub fn describe_attention(channels: usize, reduction: usize, h: usize, w: usize) -> String {
    format!("input {channels} {h} {w}\nattention {channels} {reduction}\n")
}

/// Encoder layers owned by one split on an `h × w` image: the convolution
/// that produces the band, its unify stage and its hyper-encoder.
pub fn describe_encoder(cfg: &ModelConfig, split: Split, h: usize, w: usize) -> String {
    let (b, m, z) = (cfg.base_channels, cfg.latent_channels, cfg.hyper_channels);
    let mut s = String::new();
    match split {
        Split::Low => {
            s += &format!("input {b} {} {}\n", h / 4, w / 4);
            s += &format!("conv {b} {b} {} 1\n", if cfg.linear { 1 } else { 3 });
        }
        Split::Mid => {
            s += &format!("input {b} {} {}\n", h / 4, w / 4);
            s += &format!("conv {b} {b} 3 2\n");
        }
        Split::High => {
            s += &format!("input {b} {} {}\n", h / 8, w / 8);
            s += &format!("conv {b} {b} 3 2\n");
        }
    }
    let lat = if cfg.linear {
        b
    } else {
        s += &format!("conv {b} {m} 3 1\nrelu\nconv {m} {m} 3 1\n");
        m
    };
    s += &format!("abs\nconv {lat} {z} 3 1\nrelu\nconv {z} {z} 5 2\nrelu\nconv {z} {z} 5 2\n");
    s
}

/// Synthesis branch of one split, reconstructing an `h × w` image.
pub fn describe_decoder(cfg: &ModelConfig, split: Split, h: usize, w: usize) -> String {
    let (b, m) = (cfg.latent_channels, cfg.base_channels);
    let depth = Branch::depth(split);
    let f = 1 << depth;
    let mut s = format!("input {b} {} {}\n", h / f, w / f);
    for n in 0..depth {
        let cin = if n == 0 { b } else { m };
        let cout = if n + 1 == depth { 3 } else { m };
        s += &format!("tconv {cin} {cout} 5 2\n");
        if n + 1 < depth {
            s += "relu\n";
        }
        if n == 0 {
            s += &format!("attention {m} {}\n", cfg.attention_reduction);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Codec;
    use crate::split::PerSplit;

    #[test]
    fn attention_matches_published_counts() {
        let c = count_params_macs(&describe_attention(64, 8, 16, 16)).unwrap();
        assert_eq!((c.params, c.macs), (5200, 1_331_200));
    }

    #[test]
    fn single_conv_arithmetic() {
        let c = count_params_macs("input 1 4 4\nconv 1 1 3 1\n").unwrap();
        assert_eq!((c.params, c.macs), (10, 160));
        let t = count_params_macs("input 2 4 4\ntconv 2 1 5 2 # up\n").unwrap();
        assert_eq!(t.layers[0].output, [1, 8, 8]);
        assert_eq!(t.params, 51);
    }

    #[test]
    fn errors() {
        assert!(matches!(count_params_macs("input 1 4 4\nnonlocal 1\n"), Err(Error::UnsupportedLayer(k)) if k == "nonlocal"));
        assert!(count_params_macs("conv 1 1 3 1\n").is_err());
        assert!(count_params_macs("input 2 4 4\nconv 1 1 3 1\n").is_err());
        assert!(count_params_macs("").is_err());
    }

    #[test]
    fn descriptions_match_built_parameters() {
        let cfg = ModelConfig { base_channels: 8, latent_channels: 6, hyper_channels: 4, attention_reduction: 4, ..ModelConfig::desk() };
        let codec = Codec::new(cfg.clone(), 0).unwrap();
        let count = |prefixes: &[String]| -> usize {
            codec
                .params()
                .iter()
                .filter(|(_, n, _)| prefixes.iter().any(|p| n.starts_with(p.as_str())))
                .map(|(_, _, t)| t.numel())
                .sum()
        };
        let band = PerSplit([
            "analysis.down1.".to_string(),
            "analysis.down0.".to_string(),
            "analysis.same.".to_string(),
        ]);
        for s in Split::ALL {
            let enc = count_params_macs(&describe_encoder(&cfg, s, 64, 64)).unwrap();
            let want = count(&[band[s].clone(), format!("analysis.unify.{s}."), format!("hyper_enc.{s}.")]);
            assert_eq!(enc.params, want, "encoder {s}");
            let dec = count_params_macs(&describe_decoder(&cfg, s, 64, 64)).unwrap();
            assert_eq!(dec.params, count(&[format!("synthesis.{s}.")]), "decoder {s}");
            assert_eq!(dec.layers.last().unwrap().output, [3, 64, 64]);
        }
    }

    #[test]
    fn low_branch_dominates_at_full_scale() {
        let cfg = ModelConfig::full_scale();
        let macs = PerSplit::from_fn(|s| count_params_macs(&describe_encoder(&cfg, s, 512, 768)).unwrap().macs);
        assert!(macs[Split::Low] > macs[Split::Mid] && macs[Split::Low] > macs[Split::High]);
    }
}
