use ndarray::Array3;

use crate::error::{DenoiseError, Result};

/// Acquisition modality. Only used for bookkeeping; every algorithm runs
/// the same code path for all three.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Mri,
    Ct,
    Synthetic,
}

/// Dense real-valued image or voxel block. 2D images are stored as 3D
/// volumes with `nz = 1` so the whole pipeline is a single code path.
///
/// Axis order is `(z, y, x)`, so the default ndarray iteration order is
/// x-fastest, matching the on-disk layout of the volume file format.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVolume {
    data: Array3<f64>,
    intensity_max: f64,
    modality: Modality,
}

impl ImageVolume {
    pub fn new(data: Array3<f64>, intensity_max: f64, modality: Modality) -> Result<Self> {
        if !(intensity_max.is_finite() && intensity_max > 0.0) {
            return Err(DenoiseError::NonFinite { index: 0 });
        }
        let (nz, ny, nx) = data.dim();
        if nz == 0 || ny == 0 || nx == 0 {
            return Err(DenoiseError::ShapeMismatch {
                expected: (1, 1, 1),
                got: (nz, ny, nx),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(DenoiseError::NonFinite { index });
        }
        Ok(Self {
            data,
            intensity_max,
            modality,
        })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn intensity_max(&self) -> f64 {
        self.intensity_max
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    /// `(nz, ny, nx)`
    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn is_2d(&self) -> bool {
        self.data.dim().0 == 1
    }

    /// Clamp all values to `[0, intensity_max]` and return the result.
    pub fn clamped(&self) -> Self {
        let max = self.intensity_max;
        Self {
            data: self.data.mapv(|v| v.clamp(0.0, max)),
            intensity_max: max,
            modality: self.modality,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    #[test]
    fn rejects_empty_axis() {
        let data = Array3::<f64>::zeros((0, 4, 4));
        assert!(ImageVolume::new(data, 255.0, Modality::Synthetic).is_err());
    }

    #[test]
    fn rejects_nan() {
        let mut data = Array3::<f64>::zeros((1, 4, 4));
        data[(0, 2, 3)] = f64::NAN;
        let err = ImageVolume::new(data, 255.0, Modality::Synthetic).unwrap_err();
        assert!(matches!(err, DenoiseError::NonFinite { .. }));
    }

    proptest! {
        #[test]
        fn rejects_injected_non_finite(
            nz in 1usize..4, ny in 1usize..8, nx in 1usize..8,
            vals in proptest::collection::vec(-1e3f64..1e3, 256),
            poison_at in 0usize..256,
            poison in prop_oneof![Just(f64::NAN), Just(f64::INFINITY), Just(f64::NEG_INFINITY)],
        ) {
            let n = nz * ny * nx;
            let mut v: Vec<f64> = vals[..n].to_vec();
            let clean = Array3::from_shape_vec((nz, ny, nx), v.clone()).unwrap();
            prop_assert!(ImageVolume::new(clean, 255.0, Modality::Synthetic).is_ok());
            v[poison_at % n] = poison;
            let dirty = Array3::from_shape_vec((nz, ny, nx), v).unwrap();
            prop_assert!(ImageVolume::new(dirty, 255.0, Modality::Synthetic).is_err());
        }
    }
}
