//! Synthetic ground-truth generators: the classic Shepp-Logan head
//! phantom (2D) and a small piecewise-constant 3D phantom for magnitude
//! MRI experiments.

use ndarray::Array3;

use crate::error::{DenoiseError, Result};
use crate::volume::{ImageVolume, Modality};

/// Canonical Shepp-Logan ellipse table: additive intensity, semi-axes
/// (a, b), center (x0, y0), rotation in degrees. Intensities sum to 2.0
/// inside the skull shell, so the image is rescaled by intensity_max / 2.
const SHEPP_ELLIPSES: [(f64, f64, f64, f64, f64, f64); 10] = [
    (2.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.98, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.02, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.02, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.01, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.01, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.01, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.01, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.01, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.01, 0.0230, 0.0460, 0.06, -0.605, 0.0),
];

pub const SHEPP_INTENSITY_MAX: f64 = 255.0;

/// Evaluates the raw (unscaled) ellipse sum at normalized coordinates
/// (x, y) in [-1, 1]^2.
fn shepp_value(x: f64, y: f64) -> f64 {
    let mut v = 0.0;
    for &(a_int, a, b, x0, y0, phi_deg) in &SHEPP_ELLIPSES {
        let phi = phi_deg.to_radians();
        let (dx, dy) = (x - x0, y - y0);
        let xr = dx * phi.cos() + dy * phi.sin();
        let yr = -dx * phi.sin() + dy * phi.cos();
        if xr * xr / (a * a) + yr * yr / (b * b) <= 1.0 {
            v += a_int;
        }
    }
    v
}

/// Standard 10-ellipse Shepp-Logan phantom rescaled to [0, 255].
pub fn shepp_logan(nx: usize, ny: usize) -> Result<ImageVolume> {
    if nx < 32 || ny < 32 {
        return Err(DenoiseError::TooSmall {
            min_dim: 32,
            got: nx.min(ny),
        });
    }
    let scale = SHEPP_INTENSITY_MAX / 2.0;
    let data = Array3::from_shape_fn((1, ny, nx), |(_, yi, xi)| {
        // Pixel centers mapped to [-1, 1].
        let x = (2.0 * (xi as f64 + 0.5)) / nx as f64 - 1.0;
        let y = 1.0 - (2.0 * (yi as f64 + 0.5)) / ny as f64;
        (shepp_value(x, y) * scale).clamp(0.0, SHEPP_INTENSITY_MAX)
    });
    ImageVolume::new(data, SHEPP_INTENSITY_MAX, Modality::Synthetic)
}

/// Tissue levels of the 3D MRI phantom, ambient outward to innermost.
/// The ambient level is deliberately nonzero: magnitude-MRI backgrounds
/// are never true zero, and a zero floor would make Rician noise there
/// pure Rayleigh bias.
pub const MRI_LEVELS: [f64; 4] = [60.0, 120.0, 180.0, 240.0];

/// Piecewise-constant nested-ellipsoid 3D phantom with four tissue
/// levels, on a [0, 255] scale.
pub fn mri_phantom(nx: usize, ny: usize, nz: usize) -> Result<ImageVolume> {
    if nx < 16 || ny < 16 || nz < 4 {
        return Err(DenoiseError::TooSmall {
            min_dim: 16,
            got: nx.min(ny).min(nz * 4),
        });
    }
    // Semi-axes per shell in normalized (x, y, z) coordinates.
    let shells = [
        (0.85, 0.90, 0.80, MRI_LEVELS[1]),
        (0.58, 0.66, 0.55, MRI_LEVELS[2]),
        (0.30, 0.36, 0.28, MRI_LEVELS[3]),
    ];
    let data = Array3::from_shape_fn((nz, ny, nx), |(zi, yi, xi)| {
        let x = (2.0 * (xi as f64 + 0.5)) / nx as f64 - 1.0;
        let y = (2.0 * (yi as f64 + 0.5)) / ny as f64 - 1.0;
        let z = (2.0 * (zi as f64 + 0.5)) / nz as f64 - 1.0;
        let mut v = MRI_LEVELS[0];
        for &(a, b, c, level) in &shells {
            if x * x / (a * a) + y * y / (b * b) + z * z / (c * c) <= 1.0 {
                v = level;
            }
        }
        v
    });
    ImageVolume::new(data, 255.0, Modality::Mri)
}
