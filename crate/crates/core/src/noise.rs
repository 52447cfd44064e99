//! Forward noise simulators: Rician (MRI magnitude images) and scaled
//! Poisson (low-dose CT). Both are pure functions of (input, params,
//! seed), parallel over voxels with a per-voxel RNG stream so results do
//! not depend on thread count.

use ndarray::Array3;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

use crate::error::{DenoiseError, Result};
use crate::rng::split;
use crate::volume::ImageVolume;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RicianParams {
    pub sigma: f64,
    pub level_percent: f64,
}

impl RicianParams {
    /// The "p% noise" convention: sigma = (p/100) * intensity_max.
    pub fn from_percent(level_percent: f64, intensity_max: f64) -> Self {
        Self {
            sigma: level_percent / 100.0 * intensity_max,
            level_percent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonParams {
    pub peak_counts: f64,
    pub exposure_t: f64,
}

impl PoissonParams {
    /// The "p% noise" convention: lambda_peak = (100/p)^2, so relative
    /// noise at peak intensity is p%.
    pub fn from_percent(level_percent: f64) -> Self {
        Self {
            peak_counts: (100.0 / level_percent).powi(2),
            exposure_t: 1.0,
        }
    }
}

/// Y = sqrt((X + g1)^2 + g2^2) with g1, g2 ~ Normal(0, sigma^2), clamped
/// to [0, intensity_max]. This two-Gaussian construction realizes the
/// Rician conditional density exactly.
pub fn add_rician(clean: &ImageVolume, params: &RicianParams, seed: u64) -> ImageVolume {
    let normal = Normal::new(0.0, params.sigma.max(f64::MIN_POSITIVE)).unwrap();
    let max = clean.intensity_max();
    let data = per_voxel(clean, seed, move |x, rng| {
        let g1: f64 = normal.sample(rng);
        let g2: f64 = normal.sample(rng);
        ((x + g1) * (x + g1) + g2 * g2).sqrt().clamp(0.0, max)
    });
    ImageVolume::new(data, max, clean.modality()).expect("noisy volume is finite")
}

/// Scaled-Poisson photon noise: rate = (X / intensity_max) * lambda_peak
/// * t, output = count * intensity_max / (lambda_peak * t).
pub fn add_poisson(
    clean: &ImageVolume,
    params: &PoissonParams,
    seed: u64,
) -> Result<ImageVolume> {
    if let Some((index, &value)) = clean
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| **v < 0.0)
    {
        return Err(DenoiseError::NegativeIntensity { value, index });
    }
    let max = clean.intensity_max();
    let scale = params.peak_counts * params.exposure_t;
    let data = per_voxel(clean, seed, move |x, rng| {
        let rate = x / max * scale;
        let count = if rate > 0.0 {
            Poisson::new(rate).unwrap().sample(rng)
        } else {
            0.0
        };
        // No upper clamp: photon counts above the peak are real shot
        // noise; truncating them would bias the mean and shrink the
        // variance at bright voxels.
        count * max / scale
    });
    Ok(ImageVolume::new(data, max, clean.modality()).expect("noisy volume is finite"))
}

fn per_voxel<F>(clean: &ImageVolume, seed: u64, f: F) -> Array3<f64>
where
    F: Fn(f64, &mut rand_chacha::ChaCha8Rng) -> f64 + Sync,
{
    let dim = clean.dim();
    let flat: Vec<f64> = clean
        .data()
        .iter()
        .cloned()
        .collect::<Vec<_>>()
        .par_iter()
        .enumerate()
        .map(|(i, &x)| {
            let mut rng = split(seed, i as u64);
            f(x, &mut rng)
        })
        .collect();
    Array3::from_shape_vec(dim, flat).expect("shape preserved")
}

/// Robust noise-scale estimate: median absolute deviation of horizontal
/// first differences, scaled by 0.6745 * sqrt(2) (the MAD-to-sigma factor
/// for the difference of two independent Gaussians).
pub fn estimate_sigma(vol: &ImageVolume) -> f64 {
    let d = vol.data();
    let (nz, ny, nx) = d.dim();
    let mut diffs = Vec::with_capacity(nz * ny * nx.saturating_sub(1));
    for z in 0..nz {
        for y in 0..ny {
            for x in 1..nx {
                let diff = (d[(z, y, x)] - d[(z, y, x - 1)]).abs();
                // Exactly-zero diffs come from flat synthetic background,
                // which carries no noise information under signal-dependent
                // models and would drag the median toward zero.
                if diff > 0.0 {
                    diffs.push(diff);
                }
            }
        }
    }
    if diffs.is_empty() {
        return 0.0;
    }
    diffs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = diffs.len() / 2;
    let median = if diffs.len() % 2 == 0 {
        (diffs[mid - 1] + diffs[mid]) / 2.0
    } else {
        diffs[mid]
    };
    median / (0.6745 * std::f64::consts::SQRT_2)
}

/// Modified Bessel function of the first kind, order zero, scaled by
/// e^{-|x|} to stay finite for large arguments (Abramowitz & Stegun
/// 9.8.1/9.8.2 polynomial approximations).
pub fn bessel_i0_scaled(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 3.75 {
        let t = (ax / 3.75) * (ax / 3.75);
        let i0 = 1.0
            + t * (3.5156229
                + t * (3.0899424
                    + t * (1.2067492 + t * (0.2659732 + t * (0.0360768 + t * 0.0045813)))));
        i0 * (-ax).exp()
    } else {
        let t = 3.75 / ax;
        let p = 0.39894228
            + t * (0.01328592
                + t * (0.00225319
                    + t * (-0.00157565
                        + t * (0.00916281
                            + t * (-0.02057706
                                + t * (0.02635537 + t * (-0.01647633 + t * 0.00392377)))))));
        p / ax.sqrt()
    }
}

pub fn bessel_i0(x: f64) -> f64 {
    bessel_i0_scaled(x) * x.abs().exp()
}

/// Rician density p(y | x, sigma), evaluated in a numerically safe form
/// using the exponentially scaled Bessel function.
pub fn rician_pdf(y: f64, x: f64, sigma: f64) -> f64 {
    if y < 0.0 {
        return 0.0;
    }
    let s2 = sigma * sigma;
    let t = x * y / s2;
    // (y/s2) exp(-(y^2+x^2)/(2 s2)) I0(t)
    //   = (y/s2) exp(-(y-x)^2/(2 s2)) * [I0(t) e^{-t}]
    (y / s2) * (-(y - x) * (y - x) / (2.0 * s2)).exp() * bessel_i0_scaled(t)
}

/// CDF of the Rician density by composite Simpson integration on [0, y].
pub fn rician_cdf(y: f64, x: f64, sigma: f64, steps: usize) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    let n = steps.max(2) & !1; // even
    let h = y / n as f64;
    let mut acc = rician_pdf(0.0, x, sigma) + rician_pdf(y, x, sigma);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * rician_pdf(i as f64 * h, x, sigma);
    }
    (acc * h / 3.0).min(1.0)
}
