//! Quality metrics, BD-rate, spectral analysis and cost accounting.

pub mod bdrate;
pub mod complexity;
pub mod quality;
pub mod spectrum;

pub use bdrate::{bd_rate, RdCurve};
pub use complexity::{count_params_macs, Cost};
pub use quality::{ms_ssim, msssim_db, psnr};
pub use spectrum::{psd_bands, BandReport};

use crate::codec::{Container, ImageBuffer, PAD_MULTIPLE};
use crate::entropy::gaussian::bin_mass;
use crate::error::{Error, Result};
use crate::model::Codec;
use crate::split::{PerSplit, Split};

/// Share of the substream payload bytes (hyper plus main) held by each split.
pub fn split_bit_allocation(container: &Container) -> Result<PerSplit<f64>> {
    let bytes = PerSplit::from_fn(|s| container.split_payload_bytes(s) as f64);
    let total: f64 = bytes.iter().map(|(_, b)| b).sum();
    if total == 0.0 {
        return Err(Error::Format("container carries no payload".into()));
    }
    Ok(bytes.map(|_, b| b / total))
}

/// Parses `bytes` first, so corrupt containers are rejected.
pub fn split_bit_allocation_bytes(bytes: &[u8]) -> Result<PerSplit<f64>> {
    split_bit_allocation(&Container::from_bytes(bytes)?)
}

/// Mean absolute gap between the observed histogram of the rounded main
/// latents and the histogram the Gaussian model expects, over the values
/// `-range..=range`. Reported in symbols per bin.
pub fn entropy_loss(codec: &Codec, img: &ImageBuffer, range: i32) -> Result<f64> {
    let lat = codec.latents(&img.pad_to_multiple(PAD_MULTIPLE).to_tensor())?;
    let bins = (2 * range + 1) as usize;
    let mut observed = vec![0.0; bins];
    let mut expected = vec![0.0; bins];
    let lb = codec.gaussian.lower_bound();
    for s in Split::ALL {
        for (&v, &sigma) in lat.y_hat[s].data().iter().zip(lat.sigma[s].data()) {
            if (v as i32).abs() <= range {
                observed[(v as i32 + range) as usize] += 1.0;
            }
            let sigma = (sigma as f64).max(lb);
            for (i, e) in expected.iter_mut().enumerate() {
                *e += bin_mass(i as f64 - range as f64, sigma);
            }
        }
    }
    Ok(observed.iter().zip(&expected).map(|(o, e)| (o - e).abs()).sum::<f64>() / bins as f64)
}
