use crate::error::{Error, Result};
use crate::rans;
use crate::split::{Split, SplitMask};

pub const MAGIC: &[u8; 4] = b"FOTC";
pub const VERSION: u16 = 1;
/// Header bytes before the first substream.
pub const HEADER_LEN: usize = 4 + 2 + 1 + 4 + 4 + 8;

/// Which latent a substream carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Latent {
    Hyper,
    Main,
}

/// Fixed slot order: `z_high, z_mid, z_low, y_high, y_mid, y_low`.
pub fn slot_index(latent: Latent, split: Split) -> usize {
    let base = match latent {
        Latent::Hyper => 0,
        Latent::Main => 3,
    };
    base + Split::ALL.iter().position(|&s| s == split).expect("known split")
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Substream {
    pub count: usize,
    pub payload: Vec<u8>,
}

/// Versioned bitstream: header plus six substreams.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub mask: SplitMask,
    pub width: u32,
    pub height: u32,
    pub model_id: u64,
    pub slots: [Substream; 6],
}

impl Container {
    pub fn slot(&self, latent: Latent, split: Split) -> &Substream {
        &self.slots[slot_index(latent, split)]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.slots.iter().map(|s| 8 + s.payload.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.mask.flags());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.model_id.to_le_bytes());
        for s in &self.slots {
            out.extend(rans::frame(s.count, &s.payload)?);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a compressed container (bad magic)".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let mask = SplitMask::from_flags(bytes[6]).map_err(|e| Error::Format(e.to_string()))?;
        let width = u32::from_le_bytes(bytes[7..11].try_into().unwrap());
        let height = u32::from_le_bytes(bytes[11..15].try_into().unwrap());
        let model_id = u64::from_le_bytes(bytes[15..23].try_into().unwrap());
        if width == 0 || height == 0 {
            return Err(Error::Format("container has zero image dimensions".into()));
        }
        let mut rest = &bytes[HEADER_LEN..];
        let mut slots: [Substream; 6] = Default::default();
        for slot in &mut slots {
            let (count, payload, tail) = rans::unframe(rest)?;
            *slot = Substream { count, payload: payload.to_vec() };
            rest = tail;
        }
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after the last substream", rest.len())));
        }
        let c = Self { mask, width, height, model_id, slots };
        for s in Split::ALL {
            let present = !c.slot(Latent::Hyper, s).payload.is_empty() && !c.slot(Latent::Main, s).payload.is_empty();
            let absent = c.slot(Latent::Hyper, s).payload.is_empty()
                && c.slot(Latent::Main, s).payload.is_empty()
                && c.slot(Latent::Hyper, s).count == 0
                && c.slot(Latent::Main, s).count == 0;
            if (mask.contains(s) && !present) || (!mask.contains(s) && !absent) {
                return Err(Error::Format(format!("split `{s}` flag disagrees with its substreams")));
            }
        }
        Ok(c)
    }

    /// Payload bytes (excluding framing) of the hyper and main substreams of `split`.
    pub fn split_payload_bytes(&self, split: Split) -> usize {
        self.slot(Latent::Hyper, split).payload.len() + self.slot(Latent::Main, split).payload.len()
    }

    /// Serialized size in bytes.
    pub fn total_bytes(&self) -> usize {
        HEADER_LEN + self.slots.iter().map(|s| 8 + s.payload.len()).sum::<usize>()
    }

    /// Container bits per original pixel.
    pub fn bpp(&self) -> f64 {
        self.total_bytes() as f64 * 8.0 / (self.width as f64 * self.height as f64)
    }
}
