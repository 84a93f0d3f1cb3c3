use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit RGB image, samples interleaved row by row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} RGB image needs {} samples, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// `[1, 3, H, W]` tensor with samples divided by 255.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn(&[1, 3, h, w], |i| {
            let (c, p) = (i / (w * h), i % (w * h));
            self.data[p * 3 + c] as f32 / 255.0
        })
    }

    /// Clamps to `[0, 1]` and rounds to 8 bits.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [n, c, h, w] = t.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::Shape(format!("expected [1, 3, H, W], got {:?}", t.shape())));
        }
        let d = t.data();
        Ok(Self::from_fn(w, h, |x, y, ch| {
            let v = d[(ch * h + y) * w + x];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    }

    /// Replicates the right column and bottom row up to the next multiple of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> ImageBuffer {
        let w = self.width.div_ceil(m) * m;
        let h = self.height.div_ceil(m) * m;
        Self::from_fn(w, h, |x, y, c| self.pixel(x.min(self.width - 1), y.min(self.height - 1), c))
    }

    /// Top-left `width × height` region.
    pub fn crop(&self, width: usize, height: usize) -> Result<ImageBuffer> {
        if width == 0 || height == 0 || width > self.width || height > self.height {
            return Err(Error::InvalidArgument(format!(
                "cannot crop {}x{} to {width}x{height}",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(width, height, |x, y, c| self.pixel(x, y, c)))
    }

    pub fn flip_horizontal(&self) -> ImageBuffer {
        Self::from_fn(self.width, self.height, |x, y, c| self.pixel(self.width - 1 - x, y, c))
    }

    pub fn region(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<ImageBuffer> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::InvalidArgument("region outside image".into()));
        }
        Ok(Self::from_fn(width, height, |x, y, c| self.pixel(x0 + x, y0 + y, c)))
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PPM header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
        }
        if fields[0] != "P6" {
            return Err(Error::Format(format!("unsupported PPM magic `{}` (need P6)", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM header field `{s}`")));
        let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if max != 255 {
            return Err(Error::Format(format!("only 8-bit PPM is supported (maxval {max})")));
        }
        pos += 1;
        let body = bytes.get(pos..pos + w * h * 3).ok_or_else(|| Error::Format("truncated PPM data".into()))?;
        Self::new(w, h, body.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(BufWriter::new(&mut out), self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
            writer.write_image_data(&self.data).map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let mut decoder = png::Decoder::new(Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| Error::Format(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Format("PNG too large".into()))?];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let src = &buf[..info.buffer_size()];
        let channels = info.color_type.samples();
        let data = match channels {
            1 | 2 => src.chunks_exact(channels).flat_map(|p| [p[0]; 3]).collect(),
            3 | 4 => src.chunks_exact(channels).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            n => return Err(Error::Format(format!("unsupported PNG layout with {n} channels"))),
        };
        Self::new(w, h, data)
    }

    /// Reads PPM (P6) or PNG, chosen by content.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.starts_with(b"\x89PNG") {
            Self::from_png(&bytes)
        } else if bytes.starts_with(b"P6") {
            Self::from_ppm(&bytes)
        } else {
            Err(Error::Format(format!("{}: not a P6 PPM or PNG file", path.display())))
        }
    }

    /// Writes PNG for a `.png` extension, PPM otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        let bytes = if is_png { self.to_png()? } else { self.to_ppm() };
        fs::write(path, bytes)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |x, y, c| (x * 31 + y * 17 + c * 90) as u8)
    }

    #[test]
    fn tensor_round_trip_is_lossless() {
        let img = ImageBuffer::from_fn(16, 16, |x, y, c| ((x * 16 + y) as u8).wrapping_add(c as u8));
        assert_eq!(ImageBuffer::from_tensor(&img.to_tensor()).unwrap(), img);
    }

    #[test]
    fn padding_and_crop() {
        let img = sample(700, 500);
        let p = img.pad_to_multiple(64);
        assert_eq!((p.width(), p.height()), (704, 512));
        assert_eq!(p.pixel(703, 511, 1), img.pixel(699, 499, 1));
        assert_eq!(p.crop(700, 500).unwrap(), img);
        let kodak = sample(768, 512);
        assert_eq!(kodak.pad_to_multiple(64), kodak);
        let dot = sample(1, 1);
        let p = dot.pad_to_multiple(64);
        assert_eq!((p.width(), p.height()), (64, 64));
        assert_eq!(p.crop(1, 1).unwrap(), dot);
    }

    #[test]
    fn ppm_and_png_round_trip() {
        let img = sample(13, 7);
        assert_eq!(ImageBuffer::from_ppm(&img.to_ppm()).unwrap(), img);
        assert_eq!(ImageBuffer::from_png(&img.to_png().unwrap()).unwrap(), img);
        let commented = b"P6\n# hi\n2 1\n255\n\x01\x02\x03\x04\x05\x06";
        assert_eq!(ImageBuffer::from_ppm(commented).unwrap().pixel(1, 0, 2), 6);
        assert!(ImageBuffer::from_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(ImageBuffer::from_ppm(b"P6\n4 4\n255\n\x00").is_err());
    }
}
