//! Range-ANS coder over [`CdfTable`] contexts.
//!
//! 32-bit state kept in `[2^23, 2^31)`, renormalized one byte at a time.
//! The encoder runs over the symbols in reverse and the byte buffer is
//! reversed once at the end, so the decoder reads forward. The final state is
//! flushed as 4 bytes, most significant first in the decoded order.

use crate::entropy::cdf::{CdfTable, Slot, PRECISION_BITS};
use crate::error::{Error, Result};

const LOWER: u64 = 1 << 23;
const WORD_BITS: u32 = 8;

/// Symbols to code: `values[i]` is coded with context `contexts[i]`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SymbolStream {
    pub values: Vec<i32>,
    pub contexts: Vec<usize>,
}

impl SymbolStream {
    pub fn new(values: Vec<i32>, contexts: Vec<usize>) -> Result<Self> {
        if values.len() != contexts.len() {
            return Err(Error::InvalidArgument(format!(
                "{} values but {} contexts",
                values.len(),
                contexts.len()
            )));
        }
        Ok(Self { values, contexts })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

struct Encoder {
    state: u64,
    bytes: Vec<u8>,
}

impl Encoder {
    fn put(&mut self, start: u32, freq: u32) {
        let x_max = ((LOWER >> PRECISION_BITS) << WORD_BITS) * freq as u64;
        let mut x = self.state;
        while x >= x_max {
            self.bytes.push(x as u8);
            x >>= WORD_BITS;
        }
        let f = freq as u64;
        self.state = ((x / f) << PRECISION_BITS) + x % f + start as u64;
    }

    /// `n ≤ 16` equiprobable bits.
    fn put_bits(&mut self, bits: u32, n: u32) {
        let shift = PRECISION_BITS - n;
        self.put(bits << shift, 1 << shift);
    }

    fn finish(mut self) -> Vec<u8> {
        self.bytes.extend_from_slice(&(self.state as u32).to_le_bytes());
        self.bytes.reverse();
        self.bytes
    }
}

/// Encodes `stream`. Out-of-range values go through the escape slot when the
/// table has one; otherwise they are an error naming the position.
pub fn encode(stream: &SymbolStream, table: &CdfTable) -> Result<Vec<u8>> {
    let mut enc = Encoder { state: LOWER, bytes: Vec::with_capacity(stream.len() / 2 + 4) };
    for i in (0..stream.len()).rev() {
        let (value, ctx) = (stream.values[i], stream.contexts[i]);
        if ctx >= table.contexts() {
            return Err(Error::Coder(format!("symbol {i}: context {ctx} out of range")));
        }
        match table.slot(ctx, value) {
            Some(Slot::Symbol(s)) => {
                let (start, freq) = table.range(ctx, s);
                enc.put(start, freq);
            }
            Some(Slot::Escape(s)) => {
                let (_, distance) = overflow(table, ctx, value);
                let m = distance + 1;
                let k = 63 - m.leading_zeros();
                let mut chunks = Vec::new();
                let mut remaining = k;
                while remaining > 0 {
                    let n = remaining.min(PRECISION_BITS);
                    remaining -= n;
                    chunks.push((((m >> remaining) & ((1 << n) - 1)) as u32, n));
                }
                for &(bits, n) in chunks.iter().rev() {
                    enc.put_bits(bits, n);
                }
                enc.put_bits(1, 1);
                for _ in 0..k {
                    enc.put_bits(0, 1);
                }
                let (start, freq) = table.range(ctx, s);
                enc.put(start, freq);
            }
            None => {
                return Err(Error::Coder(format!(
                    "symbol {i}: value {value} outside the support of context {ctx} and no escape"
                )))
            }
        }
    }
    Ok(enc.finish())
}

struct Decoder<'a> {
    state: u64,
    bytes: &'a [u8],
    pos: usize,
}

impl Decoder<'_> {
    fn byte(&mut self) -> Result<u64> {
        let b = self
            .bytes
            .get(self.pos)
            .ok_or_else(|| Error::Coder("substream truncated".into()))?;
        self.pos += 1;
        Ok(*b as u64)
    }

    fn slot(&self) -> u32 {
        (self.state & ((1 << PRECISION_BITS) - 1)) as u32
    }

    fn get_bits(&mut self, n: u32) -> Result<u32> {
        let shift = PRECISION_BITS - n;
        let bits = self.slot() >> shift;
        self.advance(bits << shift, 1 << shift)?;
        Ok(bits)
    }

    fn advance(&mut self, start: u32, freq: u32) -> Result<()> {
        let mut x = freq as u64 * (self.state >> PRECISION_BITS) + self.slot() as u64 - start as u64;
        while x < LOWER {
            x = (x << WORD_BITS) | self.byte()?;
        }
        self.state = x;
        Ok(())
    }
}

/// Decodes `contexts.len()` symbols; the inverse of [`encode`].
pub fn decode(bytes: &[u8], table: &CdfTable, contexts: &[usize]) -> Result<Vec<i32>> {
    let mut dec = Decoder { state: 0, bytes, pos: 0 };
    for _ in 0..4 {
        dec.state = (dec.state << 8) | dec.byte()?;
    }
    if dec.state < LOWER {
        return Err(Error::Coder("invalid initial state".into()));
    }
    let mut out = Vec::with_capacity(contexts.len());
    for (i, &ctx) in contexts.iter().enumerate() {
        if ctx >= table.contexts() {
            return Err(Error::Coder(format!("symbol {i}: context {ctx} out of range")));
        }
        let s = table.lookup(ctx, dec.slot());
        let (start, freq) = table.range(ctx, s);
        dec.advance(start, freq)?;
        if table.has_escape() && s >= table.support(ctx) {
            let above = s > table.support(ctx);
            let mut k = 0;
            while dec.get_bits(1)? == 0 {
                k += 1;
                if k > 32 {
                    return Err(Error::Coder(format!("symbol {i}: escape length prefix too long")));
                }
            }
            let mut m: u64 = 1;
            let mut remaining = k;
            while remaining > 0 {
                let n = remaining.min(PRECISION_BITS);
                m = (m << n) | dec.get_bits(n)? as u64;
                remaining -= n;
            }
            let d = (m - 1) as i64;
            let value = if above {
                table.offset(ctx) as i64 + table.support(ctx) as i64 + d
            } else {
                table.offset(ctx) as i64 - 1 - d
            };
            let value = i32::try_from(value).map_err(|_| Error::Coder(format!("symbol {i}: escaped value out of range")))?;
            out.push(value);
        } else {
            out.push(table.offset(ctx) + s as i32);
        }
    }
    if dec.state != LOWER || dec.pos != bytes.len() {
        return Err(Error::Coder("substream corrupt: trailing data or bad final state".into()));
    }
    Ok(out)
}

/// Side (below or above the support) and distance past the support edge of
/// an escaped value.
fn overflow(table: &CdfTable, ctx: usize, value: i32) -> (bool, u64) {
    let lo = table.offset(ctx) as i64;
    let hi = lo + table.support(ctx) as i64;
    let v = value as i64;
    if v < lo {
        (false, (lo - 1 - v) as u64)
    } else {
        (true, (v - hi) as u64)
    }
}

/// Bypass bits spent after an escape symbol: the Elias-gamma code of the
/// distance past the support.
pub fn escape_bits(table: &CdfTable, ctx: usize, value: i32) -> u32 {
    let (_, d) = overflow(table, ctx, value);
    let k = 63 - (d + 1).leading_zeros();
    1 + 2 * k
}

/// Ideal code length in bits of `stream` under the quantized table.
pub fn quantized_entropy_bits(stream: &SymbolStream, table: &CdfTable) -> Result<f64> {
    let mut bits = 0.0;
    for (i, (&v, &c)) in stream.values.iter().zip(&stream.contexts).enumerate() {
        let p = table
            .probability(c, v)
            .ok_or_else(|| Error::Coder(format!("symbol {i}: value {v} not codable")))?;
        bits -= p.log2();
        if matches!(table.slot(c, v), Some(Slot::Escape(_))) {
            bits += escape_bits(table, c, v) as f64;
        }
    }
    Ok(bits)
}

/// Substream framing: `count u32 | byte length u32 | payload`.
pub fn frame(count: usize, payload: &[u8]) -> Result<Vec<u8>> {
    let count = u32::try_from(count).map_err(|_| Error::Coder("too many symbols".into()))?;
    let len = u32::try_from(payload.len()).map_err(|_| Error::Coder("substream too large".into()))?;
    let mut out = Vec::with_capacity(8 + payload.len());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Splits one framed substream off the front of `bytes`, returning
/// `(count, payload, rest)`.
pub fn unframe(bytes: &[u8]) -> Result<(usize, &[u8], &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::Format("substream header truncated".into()));
    }
    let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() < len {
        return Err(Error::Format(format!("substream claims {len} bytes, {} available", body.len())));
    }
    Ok((count, &body[..len], &body[len..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::cdf::{quantize_pmf, TOTAL};

    fn binary(p0: f64) -> CdfTable {
        CdfTable::new(vec![quantize_pmf(&[p0, 1.0 - p0]).unwrap()], vec![0], false).unwrap()
    }

    #[test]
    fn empty_stream_is_flush_only() {
        let t = binary(0.5);
        let bytes = encode(&SymbolStream::default(), &t).unwrap();
        assert_eq!(bytes.len(), 4);
        assert!(decode(&bytes, &t, &[]).unwrap().is_empty());
    }

    #[test]
    fn uniform_bits_cost_one_bit() {
        let t = binary(0.5);
        let values: Vec<i32> = (0..1024).map(|i| (i * 7 % 3 == 0) as i32).collect();
        let s = SymbolStream::new(values.clone(), vec![0; 1024]).unwrap();
        let bytes = encode(&s, &t).unwrap();
        assert!((128..=136).contains(&bytes.len()), "{}", bytes.len());
        assert_eq!(decode(&bytes, &t, &s.contexts).unwrap(), values);
    }

    #[test]
    fn certain_symbol_costs_nothing() {
        let t = CdfTable::new(vec![vec![0, TOTAL]], vec![-3], false).unwrap();
        let s = SymbolStream::new(vec![-3; 500], vec![0; 500]).unwrap();
        let bytes = encode(&s, &t).unwrap();
        assert_eq!(bytes.len(), 4);
        assert_eq!(decode(&bytes, &t, &s.contexts).unwrap(), s.values);
    }

    #[test]
    fn escape_round_trip() {
        let t = CdfTable::from_pmfs(&[vec![0.5, 0.5]], vec![0], true).unwrap();
        let values = vec![0, 1, i32::MIN, 7, -1, i32::MAX, 1];
        let s = SymbolStream::new(values.clone(), vec![0; values.len()]).unwrap();
        let bytes = encode(&s, &t).unwrap();
        assert_eq!(decode(&bytes, &t, &s.contexts).unwrap(), values);
    }

    #[test]
    fn escape_cost_grows_with_distance() {
        let t = CdfTable::from_pmfs(&[vec![0.5, 0.5]], vec![0], true).unwrap();
        assert_eq!(escape_bits(&t, 0, 2), 1);
        assert_eq!(escape_bits(&t, 0, -1), 1);
        assert_eq!(escape_bits(&t, 0, 3), 3);
        assert_eq!(escape_bits(&t, 0, -4), 5);
        assert_eq!(escape_bits(&t, 0, i32::MAX), 1 + 2 * 30);
    }

    #[test]
    fn out_of_support_without_escape_names_position() {
        let t = binary(0.5);
        let s = SymbolStream::new(vec![0, 1, 2], vec![0; 3]).unwrap();
        let err = encode(&s, &t).unwrap_err().to_string();
        assert!(err.contains("symbol 2"), "{err}");
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let t = binary(0.3);
        let values: Vec<i32> = (0..400).map(|i| (i % 5 == 0) as i32).collect();
        let s = SymbolStream::new(values, vec![0; 400]).unwrap();
        let bytes = encode(&s, &t).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1], &t, &s.contexts).is_err());
        assert!(decode(&bytes, &t, &s.contexts[..399]).is_err());
        assert!(decode(&[], &t, &[]).is_err());
    }

    #[test]
    fn framing_round_trip() {
        let mut buf = frame(3, &[1, 2, 3, 4]).unwrap();
        buf.extend(frame(0, &[]).unwrap());
        let (n, p, rest) = unframe(&buf).unwrap();
        assert_eq!((n, p), (3, &[1u8, 2, 3, 4][..]));
        let (n, p, rest) = unframe(rest).unwrap();
        assert_eq!((n, p.len(), rest.len()), (0, 0, 0));
        assert!(unframe(&buf[..10]).is_err());
    }
}
