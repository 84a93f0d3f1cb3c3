//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FOTW" | version u16 | count u32 | count × record
//! record = name_len u16 | name (UTF-8) | rank u8 | rank × dim u32 | payload
//! ```
//!
//! Payloads are raw `f32` values, except for records whose name starts with
//! one of [`INTEGER_PREFIXES`], which carry `u16` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FOTW";
pub const VERSION: u16 = 1;
pub const INTEGER_PREFIXES: [&str; 2] = ["cdf.", "meta."];

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U16(Vec<u16>),
}

impl Payload {
    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U16(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl Record {
    pub fn f32(name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Self {
        Self { name: name.into(), dims: dims.to_vec(), payload: Payload::F32(data) }
    }

    pub fn u16(name: impl Into<String>, dims: &[usize], data: Vec<u16>) -> Self {
        Self { name: name.into(), dims: dims.to_vec(), payload: Payload::U16(data) }
    }

    fn is_integer(name: &str) -> bool {
        INTEGER_PREFIXES.iter().any(|p| name.starts_with(p))
    }
}

pub fn encode(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(records.len()).map_err(|_| Error::Format("too many records".into()))?.to_le_bytes());
    for r in records {
        let numel: usize = r.dims.iter().product();
        if numel != r.payload.len() {
            return Err(Error::Shape(format!("record `{}` dims {:?} vs {} values", r.name, r.dims, r.payload.len())));
        }
        if Record::is_integer(&r.name) != matches!(r.payload, Payload::U16(_)) {
            return Err(Error::InvalidArgument(format!("record `{}` has the wrong payload type for its name", r.name)));
        }
        let name = r.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {}", r.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(u8::try_from(r.dims.len()).map_err(|_| Error::Format("rank exceeds 255".into()))?);
        for &d in &r.dims {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| Error::Format("dimension exceeds u32".into()))?.to_le_bytes());
        }
        match &r.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let rank = r.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format(format!("record `{name}` is too large")))?;
        let payload = if Record::is_integer(&name) {
            let raw = r.take(numel.checked_mul(2).ok_or_else(|| Error::Format("overflow".into()))?)?;
            Payload::U16(raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
        } else {
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("overflow".into()))?)?;
            Payload::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
        };
        records.push(Record { name, dims, payload });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint records".into()));
    }
    Ok(records)
}

/// Writes `records` to `path` via a temporary file and an atomic rename.
pub fn save(path: &Path, records: &[Record]) -> Result<()> {
    let bytes = encode(records)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path.file_name().ok_or_else(|| Error::InvalidArgument("checkpoint path has no file name".into()))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Record>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Record> {
        vec![
            Record::f32("enc.conv0.weight", &[2, 1, 1, 1], vec![1.5, -2.25]),
            Record::u16("cdf.z.cdf", &[3], vec![0, 7, 65535]),
            Record::f32("bias", &[1], vec![0.0]),
        ]
    }

    #[test]
    fn byte_layout() {
        let bytes = encode(&sample()[..1]).unwrap();
        let mut want = b"FOTW".to_vec();
        want.extend_from_slice(&1u16.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&16u16.to_le_bytes());
        want.extend_from_slice(b"enc.conv0.weight");
        want.push(4);
        for d in [2u32, 1, 1, 1] {
            want.extend_from_slice(&d.to_le_bytes());
        }
        want.extend_from_slice(&1.5f32.to_le_bytes());
        want.extend_from_slice(&(-2.25f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fotw");
        save(&path, &sample()).unwrap();
        assert_eq!(load(&path).unwrap(), sample());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&sample()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        assert!(encode(&[Record::f32("cdf.x", &[1], vec![0.0])]).is_err());
    }
}
