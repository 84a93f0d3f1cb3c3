use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::codec::ImageBuffer;
use crate::error::{Error, Result};

/// Largest radial frequency on the unit-period grid, reached at the corners.
pub const MAX_RADIUS: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Energy distribution over equal-width radial frequency annuli.
#[derive(Clone, Debug, PartialEq)]
pub struct BandReport {
    /// `n + 1` edges in cycles per pixel, from 0 to [`MAX_RADIUS`].
    pub edges: Vec<f64>,
    /// Share of the non-DC energy in each band; all zero for a flat image.
    pub proportions: Vec<f64>,
    pub dc_energy: f64,
    pub non_dc_energy: f64,
}

impl BandReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("band,low_edge,high_edge,proportion\n");
        for (i, p) in self.proportions.iter().enumerate() {
            s += &format!("{},{:.6},{:.6},{:.9}\n", i + 1, self.edges[i], self.edges[i + 1], p);
        }
        s
    }
}

/// Luma plane in `[0, 255]`.
pub fn grayscale(img: &ImageBuffer) -> Vec<f64> {
    img.data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Signed frequency of DFT bin `k` of an `n`-point transform.
fn freq(k: usize, n: usize) -> f64 {
    let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    k / n as f64
}

/// Power spectrum of a row-major `width × height` plane.
pub fn power_spectrum(plane: &[f64], width: usize, height: usize) -> Result<Vec<f64>> {
    if width == 0 || height == 0 || plane.len() != width * height {
        return Err(Error::Shape(format!("plane of {} samples is not {width}x{height}", plane.len())));
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let row_fft = planner.plan_fft_forward(width);
    for row in buf.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(height);
    let mut col = vec![Complex::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            col[y] = buf[y * width + x];
        }
        col_fft.process(&mut col);
        for y in 0..height {
            buf[y * width + x] = col[y];
        }
    }
    Ok(buf.iter().map(|c| c.norm_sqr()).collect())
}

/// Band energy shares of a gray plane.
pub fn psd_bands_plane(plane: &[f64], width: usize, height: usize, n_bands: usize) -> Result<BandReport> {
    if n_bands < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bands, got {n_bands}")));
    }
    let power = power_spectrum(plane, width, height)?;
    let mut energy = vec![0.0; n_bands];
    for y in 0..height {
        for x in 0..width {
            if x == 0 && y == 0 {
                continue;
            }
            let r = freq(x, width).hypot(freq(y, height));
            let band = ((r / MAX_RADIUS * n_bands as f64) as usize).min(n_bands - 1);
            energy[band] += power[y * width + x];
        }
    }
    let non_dc: f64 = energy.iter().sum();
    // Round-off leaves a tiny non-DC residue on flat inputs.
    let flat = non_dc <= power[0] * 1e-20;
    let proportions = energy.iter().map(|e| if flat { 0.0 } else { e / non_dc }).collect();
    let edges = (0..=n_bands).map(|i| MAX_RADIUS * i as f64 / n_bands as f64).collect();
    Ok(BandReport { edges, proportions, dc_energy: power[0], non_dc_energy: if flat { 0.0 } else { non_dc } })
}

/// Band energy shares of an RGB image, computed on its luma.
pub fn psd_bands(img: &ImageBuffer, n_bands: usize) -> Result<BandReport> {
    psd_bands_plane(&grayscale(img), img.width(), img.height(), n_bands)
}
