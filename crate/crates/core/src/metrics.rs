//! Image quality metrics: RMSE, PSNR, and SSIM (Wang et al. settings:
//! 11x11 Gaussian window, sigma 1.5, C1 = (0.01 L)^2, C2 = (0.03 L)^2).
//! 3D volumes are scored slice-wise and averaged.

use ndarray::ArrayView2;

use crate::error::{DenoiseError, Result};
use crate::volume::ImageVolume;

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub intensity_max: f64,
}

fn check_shapes(a: &ImageVolume, b: &ImageVolume) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(DenoiseError::ShapeMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

pub fn rmse(a: &ImageVolume, b: &ImageVolume) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.data().len() as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok((sum / n).sqrt())
}

/// 20 log10(L / rmse); +infinity when the images are identical.
pub fn psnr(a: &ImageVolume, b: &ImageVolume, intensity_max: f64) -> Result<f64> {
    let r = rmse(a, b)?;
    if r == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(20.0 * (intensity_max / r).log10())
    }
}

fn gaussian_window() -> [[f64; SSIM_WINDOW]; SSIM_WINDOW] {
    let mut w = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - c, j as f64 - c);
            *v = (-(dy * dy + dx * dx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            sum += *v;
        }
    }
    for row in w.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    w
}

fn ssim_slice(a: ArrayView2<f64>, b: ArrayView2<f64>, c1: f64, c2: f64) -> f64 {
    let w = gaussian_window();
    let (ny, nx) = a.dim();
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=ny - SSIM_WINDOW {
        for x0 in 0..=nx - SSIM_WINDOW {
            let (mut mu1, mut mu2) = (0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    mu1 += w[i][j] * a[(y0 + i, x0 + j)];
                    mu2 += w[i][j] * b[(y0 + i, x0 + j)];
                }
            }
            let (mut v1, mut v2, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let da = a[(y0 + i, x0 + j)] - mu1;
                    let db = b[(y0 + i, x0 + j)] - mu2;
                    v1 += w[i][j] * da * da;
                    v2 += w[i][j] * db * db;
                    cov += w[i][j] * da * db;
                }
            }
            let num = (2.0 * mu1 * mu2 + c1) * (2.0 * cov + c2);
            let den = (mu1 * mu1 + mu2 * mu2 + c1) * (v1 + v2 + c2);
            total += num / den;
            count += 1;
        }
    }
    total / count as f64
}

/// Mean local SSIM over valid window positions; 3D volumes are averaged
/// over z-slices.
pub fn ssim(a: &ImageVolume, b: &ImageVolume, intensity_max: f64) -> Result<f64> {
    check_shapes(a, b)?;
    let (nz, ny, nx) = a.dim();
    if ny < SSIM_WINDOW || nx < SSIM_WINDOW {
        return Err(DenoiseError::TooSmall {
            min_dim: SSIM_WINDOW,
            got: ny.min(nx),
        });
    }
    let c1 = (0.01 * intensity_max) * (0.01 * intensity_max);
    let c2 = (0.03 * intensity_max) * (0.03 * intensity_max);
    let mut total = 0.0;
    for z in 0..nz {
        let sa = a.data().index_axis(ndarray::Axis(0), z);
        let sb = b.data().index_axis(ndarray::Axis(0), z);
        total += ssim_slice(sa, sb, c1, c2);
    }
    Ok(total / nz as f64)
}

pub fn report(reference: &ImageVolume, test: &ImageVolume, intensity_max: f64) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr_db: psnr(reference, test, intensity_max)?,
        ssim: ssim(reference, test, intensity_max)?,
        rmse: rmse(reference, test)?,
        intensity_max,
    })
}
