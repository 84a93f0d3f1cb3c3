//! Image in, bitstream out, and back.

mod container;
mod image;

use std::path::Path;

pub use container::{slot_index, Container, Latent, Substream, HEADER_LEN, MAGIC, VERSION};
pub use image::ImageBuffer;

use crate::entropy::CdfTable;
use crate::error::{Error, Result};
use crate::model::Codec;
use crate::rans::{self, SymbolStream};
use crate::split::{PerSplit, Split, SplitMask};
use crate::tensor::Tensor;

/// Images are padded to a multiple of this before analysis.
pub const PAD_MULTIPLE: usize = 64;

/// Integer symbols of a rounded tensor.
fn symbols(t: &Tensor) -> Result<Vec<i32>> {
    t.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v.is_finite() && v.abs() < 2.0e9 {
                Ok(v as i32)
            } else {
                Err(Error::Coder(format!("latent element {i} is not codable ({v})")))
            }
        })
        .collect()
}

/// Channel index of every element of a `[1, C, H, W]` tensor.
fn channel_contexts(shape: &[usize]) -> Vec<usize> {
    let plane = shape[2] * shape[3];
    (0..shape[1] * plane).map(|i| i / plane).collect()
}

fn scale_contexts(codec: &Codec, sigma: &Tensor) -> Vec<usize> {
    let lb = codec.gaussian.lower_bound();
    sigma.data().iter().map(|&s| codec.gaussian.scale_index((s as f64).max(lb))).collect()
}

/// Latent shapes `(y, z)` of one split for a padded `width × height` input.
pub fn latent_shapes(codec: &Codec, split: Split, width: usize, height: usize) -> ([usize; 4], [usize; 4]) {
    let cfg = codec.config();
    let f = 4 * split.scale();
    let (yh, yw) = (height / f, width / f);
    ([1, cfg.latent_channels, yh, yw], [1, cfg.hyper_channels, yh / 4, yw / 4])
}

fn encode_split(codec: &Codec, split: Split, y_hat: &Tensor, z_hat: &Tensor) -> Result<(Substream, Substream)> {
    let tables = codec.tables()?;
    let z_stream = SymbolStream::new(symbols(z_hat)?, channel_contexts(z_hat.shape()))?;
    let z_bytes = rans::encode(&z_stream, &tables.z[split])?;
    let sigma = codec.scales(split, z_hat)?;
    let y_stream = SymbolStream::new(symbols(y_hat)?, scale_contexts(codec, &sigma))?;
    let y_bytes = rans::encode(&y_stream, &tables.y)?;
    Ok((
        Substream { count: z_stream.len(), payload: z_bytes },
        Substream { count: y_stream.len(), payload: y_bytes },
    ))
}

fn decode_split(codec: &Codec, split: Split, c: &Container) -> Result<Tensor> {
    let tables = codec.tables()?;
    let (w, h) = padded_dims(c.width as usize, c.height as usize);
    let (y_shape, z_shape) = latent_shapes(codec, split, w, h);
    let zs = c.slot(Latent::Hyper, split);
    let ys = c.slot(Latent::Main, split);
    let numel = |s: &[usize; 4]| s.iter().product::<usize>();
    if zs.count != numel(&z_shape) || ys.count != numel(&y_shape) {
        return Err(Error::Format(format!("split `{split}`: symbol counts do not match the image size")));
    }
    let z_vals = rans::decode(&zs.payload, &tables.z[split], &channel_contexts(&z_shape))
        .map_err(|e| Error::Format(format!("split `{split}` hyper-latent: {e}")))?;
    let z_hat = Tensor::new(&z_shape, z_vals.into_iter().map(|v| v as f32).collect())?;
    let sigma = codec.scales(split, &z_hat)?;
    let y_vals = rans::decode(&ys.payload, &tables.y, &scale_contexts(codec, &sigma))
        .map_err(|e| Error::Format(format!("split `{split}` latent: {e}")))?;
    Tensor::new(&y_shape, y_vals.into_iter().map(|v| v as f32).collect())
}

fn padded_dims(width: usize, height: usize) -> (usize, usize) {
    (width.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE, height.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE)
}

/// Runs `f` for every split in `mask`, on scoped threads when `parallel`.
fn per_split<V: Send>(
    mask: SplitMask,
    parallel: bool,
    f: impl Fn(Split) -> Result<V> + Sync,
) -> Result<PerSplit<Option<V>>> {
    let mut out = PerSplit::from_fn(|_| None);
    if parallel {
        let results: Vec<(Split, Result<V>)> = std::thread::scope(|scope| {
            let f = &f;
            let handles: Vec<_> = mask.splits().map(|s| (s, scope.spawn(move || f(s)))).collect();
            handles
                .into_iter()
                .map(|(s, h)| (s, h.join().unwrap_or_else(|_| Err(Error::Coder(format!("split `{s}` worker panicked"))))))
                .collect()
        });
        for (s, r) in results {
            out[s] = Some(r?);
        }
    } else {
        for s in mask.splits() {
            out[s] = Some(f(s)?);
        }
    }
    Ok(out)
}

/// Compresses `img`, keeping the splits in `mask`.
pub fn encode_image(codec: &Codec, img: &ImageBuffer, mask: SplitMask, parallel: bool) -> Result<Container> {
    codec.tables()?;
    let padded = img.pad_to_multiple(PAD_MULTIPLE);
    let lat = codec.latents(&padded.to_tensor())?;
    let streams = per_split(mask, parallel, |s| encode_split(codec, s, &lat.y_hat[s], &lat.z_hat[s]))?;
    let mut slots: [Substream; 6] = Default::default();
    for (s, pair) in streams.0.into_iter().enumerate() {
        if let Some((z, y)) = pair {
            let split = Split::ALL[s];
            slots[slot_index(Latent::Hyper, split)] = z;
            slots[slot_index(Latent::Main, split)] = y;
        }
    }
    Ok(Container {
        mask,
        width: img.width() as u32,
        height: img.height() as u32,
        model_id: codec.model_id(),
        slots,
    })
}

/// Reconstructs the splits in `request` (all stored splits when `None`).
pub fn decode_container(codec: &Codec, c: &Container, request: Option<SplitMask>, parallel: bool) -> Result<ImageBuffer> {
    if c.model_id != codec.model_id() {
        return Err(Error::ModelMismatch(format!(
            "bitstream was written by model {:016x}, decoder has {:016x}",
            c.model_id,
            codec.model_id()
        )));
    }
    let mask = request.unwrap_or(c.mask);
    if !mask.is_subset_of(c.mask) {
        return Err(Error::InvalidArgument(format!(
            "requested splits `{mask}` but the bitstream only holds `{}`",
            c.mask
        )));
    }
    codec.tables()?;
    let y_hat = per_split(mask, parallel, |s| decode_split(codec, s, c))?;
    let x = codec.synthesize(&y_hat, mask)?;
    ImageBuffer::from_tensor(&x)?.crop(c.width as usize, c.height as usize)
}

/// Size summary of one encode.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodeStats {
    pub bytes: usize,
    pub bpp: f64,
    pub split_bytes: PerSplit<usize>,
}

impl EncodeStats {
    pub fn of(c: &Container) -> Self {
        Self { bytes: c.total_bytes(), bpp: c.bpp(), split_bytes: PerSplit::from_fn(|s| c.split_payload_bytes(s)) }
    }
}

pub fn encode_file(codec: &Codec, input: &Path, output: &Path, mask: SplitMask) -> Result<EncodeStats> {
    let img = ImageBuffer::load(input)?;
    let c = encode_image(codec, &img, mask, true)?;
    std::fs::write(output, c.to_bytes()?)?;
    Ok(EncodeStats::of(&c))
}

pub fn decode_file(codec: &Codec, input: &Path, output: &Path, request: Option<SplitMask>) -> Result<ImageBuffer> {
    let c = Container::from_bytes(&std::fs::read(input)?)?;
    let img = decode_container(codec, &c, request, true)?;
    img.save(output)?;
    Ok(img)
}

/// Ideal code length in bits of the stored substreams under the coding tables.
pub fn ideal_bits(codec: &Codec, img: &ImageBuffer, split: Split) -> Result<(f64, f64)> {
    let tables = codec.tables()?;
    let lat = codec.latents(&img.pad_to_multiple(PAD_MULTIPLE).to_tensor())?;
    let z = SymbolStream::new(symbols(&lat.z_hat[split])?, channel_contexts(lat.z_hat[split].shape()))?;
    let sigma = codec.scales(split, &lat.z_hat[split])?;
    let y = SymbolStream::new(symbols(&lat.y_hat[split])?, scale_contexts(codec, &sigma))?;
    Ok((rans::quantized_entropy_bits(&z, &tables.z[split])?, rans::quantized_entropy_bits(&y, &tables.y)?))
}

/// Tables used for coding, exposed for diagnostics.
pub fn coding_tables(codec: &Codec, split: Split) -> Result<(&CdfTable, &CdfTable)> {
    let t = codec.tables()?;
    Ok((&t.z[split], &t.y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn small() -> Codec {
        let cfg = ModelConfig { base_channels: 8, latent_channels: 8, hyper_channels: 4, attention_reduction: 4, ..ModelConfig::desk() };
        Codec::new(cfg, 3).unwrap()
    }

    fn img(w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |x, y, c| ((x * 5 + y * 3 + c * 60) % 256) as u8)
    }

    #[test]
    fn latent_shapes_match_model() {
        let codec = small();
        let lat = codec.latents(&img(64, 128).to_tensor()).unwrap();
        for s in Split::ALL {
            let (y, z) = latent_shapes(&codec, s, 64, 128);
            assert_eq!(lat.y_hat[s].shape(), &y);
            assert_eq!(lat.z_hat[s].shape(), &z);
        }
    }

    #[test]
    fn decode_matches_direct_reconstruction() {
        let codec = small();
        let im = img(70, 50);
        for mask in SplitMask::all_masks() {
            let c = encode_image(&codec, &im, mask, false).unwrap();
            let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
            let dec = decode_container(&codec, &back, None, true).unwrap();
            let direct = codec.reconstruct_direct(&im.pad_to_multiple(64).to_tensor(), mask).unwrap();
            let direct = ImageBuffer::from_tensor(&direct).unwrap().crop(70, 50).unwrap();
            assert_eq!(dec, direct, "mask {mask}");
        }
    }

    #[test]
    fn parallel_and_serial_agree() {
        let codec = small();
        let im = img(64, 64);
        let a = encode_image(&codec, &im, SplitMask::FULL, false).unwrap();
        let b = encode_image(&codec, &im, SplitMask::FULL, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn request_must_be_stored() {
        let codec = small();
        let c = encode_image(&codec, &img(64, 64), SplitMask::parse("low").unwrap(), false).unwrap();
        assert!(decode_container(&codec, &c, Some(SplitMask::parse("low,mid").unwrap()), false).is_err());
        let other = Codec::new(ModelConfig { hyper_channels: 6, ..codec.config().clone() }, 3).unwrap();
        assert!(matches!(decode_container(&other, &c, None, false), Err(Error::ModelMismatch(_))));
    }
}
