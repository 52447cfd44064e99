//! Overcomplete dictionary: column-normalized atom matrix, separable
//! oversampled-DCT initialization, and the binary file format.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use crate::error::{DenoiseError, Result};

pub const DICT_MAGIC: &[u8; 5] = b"DICT1";
const NORM_TOL: f64 = 1e-10;

/// Column-normalized overcomplete atom matrix, m rows (vectorized patch
/// length) by k columns. `usage` records how many patches used each atom
/// during the latest K-SVD sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: DMatrix<f64>,
    usage: Vec<u32>,
}

impl Dictionary {
    /// Wraps an atom matrix, checking finiteness, unit column norms, and
    /// k >= m. Strict overcompleteness (k > m) is what the pipeline uses;
    /// square dictionaries are accepted so bases can be wrapped directly.
    pub fn new(atoms: DMatrix<f64>) -> Result<Self> {
        let (m, k) = atoms.shape();
        if k < m || m == 0 {
            return Err(DenoiseError::NotFactorizable { k, patch: (m, 0, 0) });
        }
        if let Some(index) = atoms.iter().position(|v| !v.is_finite()) {
            return Err(DenoiseError::NonFinite { index });
        }
        for j in 0..k {
            let n = atoms.column(j).norm();
            if (n - 1.0).abs() > NORM_TOL {
                return Err(DenoiseError::NonFinite { index: j });
            }
        }
        Ok(Self {
            usage: vec![0; k],
            atoms,
        })
    }

    pub fn m(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn k(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn atoms(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    pub fn atom(&self, i: usize) -> nalgebra::DVectorView<'_, f64> {
        self.atoms.column(i)
    }

    pub fn usage(&self) -> &[u32] {
        &self.usage
    }

    pub(crate) fn set_atom(&mut self, i: usize, v: &DVector<f64>) {
        self.atoms.set_column(i, v);
    }

    pub(crate) fn set_usage(&mut self, usage: Vec<u32>) {
        self.usage = usage;
    }

    /// Max column-norm deviation from 1; kept around for assertions.
    pub fn max_norm_error(&self) -> f64 {
        (0..self.k())
            .map(|j| (self.atoms.column(j).norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Tiles atoms into a grayscale mosaic (one cell per atom, each
    /// rescaled to its own min/max), using the central z-slice for 3D
    /// patches. Cells are separated by a one-pixel dark border.
    pub fn mosaic(&self, patch_shape: (usize, usize, usize)) -> Array2<f64> {
        let (pz, py, px) = patch_shape;
        let k = self.k();
        let cols = (k as f64).sqrt().ceil() as usize;
        let rows = k.div_ceil(cols);
        let ch = py + 1;
        let cw = px + 1;
        let mut img = Array2::<f64>::zeros((rows * ch + 1, cols * cw + 1));
        let zmid = pz / 2;
        for i in 0..k {
            let a = self.atoms.column(i);
            let cell: Vec<f64> = (0..py * px)
                .map(|p| a[zmid * py * px + p])
                .collect();
            let lo = cell.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = cell.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi - lo > 1e-12 { hi - lo } else { 1.0 };
            let (r, c) = (i / cols, i % cols);
            for y in 0..py {
                for x in 0..px {
                    img[(r * ch + 1 + y, c * cw + 1 + x)] =
                        (cell[y * px + x] - lo) / span * 255.0;
                }
            }
        }
        img
    }

    /// Binary serialization: magic, m and k as u64 LE, column-major f64 LE.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DICT_MAGIC)?;
        w.write_all(&(self.m() as u64).to_le_bytes())?;
        w.write_all(&(self.k() as u64).to_le_bytes())?;
        for v in self.atoms.iter() {
            // nalgebra stores column-major, so plain iteration is already
            // the declared on-disk order.
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != DICT_MAGIC {
            return Err(DenoiseError::BadMagic { expected: "DICT1" });
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let m = u64::from_le_bytes(buf8) as usize;
        r.read_exact(&mut buf8)?;
        let k = u64::from_le_bytes(buf8) as usize;
        let mut data = vec![0.0f64; m * k];
        let mut body = vec![0u8; m * k * 8];
        let got = read_fully(r, &mut body)?;
        if got != body.len() {
            return Err(DenoiseError::TruncatedBody {
                expected: body.len(),
                got,
            });
        }
        for (v, chunk) in data.iter_mut().zip(body.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Dictionary::new(DMatrix::from_vec(m, k, data))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_fully<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut total = 0;
    while total < buf.len() {
        let n = r.read(&mut buf[total..])?;
        if n == 0 {
            break;
        }
        total += n;
    }
    Ok(total)
}

/// Per-axis atom counts `(kz, ky, kx)` with `k = kz * ky * kx` and each
/// factor at least the patch extent on that axis. Axes of extent 1 keep a
/// single frequency (oversampling a singleton axis would duplicate
/// atoms). Among valid factorizations the lexicographically smallest
/// `(kz, ky, kx)` with minimal max oversampling ratio wins.
fn factorize(k: usize, patch_shape: (usize, usize, usize)) -> Option<(usize, usize, usize)> {
    let (pz, py, px) = patch_shape;
    let mut best: Option<((usize, usize, usize), f64)> = None;
    for kz in 1..=k {
        if k % kz != 0 {
            continue;
        }
        if (pz == 1 && kz != 1) || kz < pz {
            continue;
        }
        let rest = k / kz;
        for ky in 1..=rest {
            if rest % ky != 0 {
                continue;
            }
            let kx = rest / ky;
            if (py == 1 && ky != 1) || ky < py || (px == 1 && kx != 1) || kx < px {
                continue;
            }
            let ratio = (kz as f64 / pz as f64)
                .max(ky as f64 / py as f64)
                .max(kx as f64 / px as f64);
            let cand = ((kz, ky, kx), ratio);
            best = match best {
                None => Some(cand),
                Some((bf, br)) => {
                    if ratio < br - 1e-12 || (ratio < br + 1e-12 && (kz, ky, kx) < bf) {
                        Some(cand)
                    } else {
                        Some((bf, br))
                    }
                }
            };
        }
    }
    best.map(|(f, _)| f)
}

fn cosine_table(n: usize, count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|f| {
            (0..n)
                .map(|x| (std::f64::consts::PI * f as f64 * (x as f64 + 0.5) / count as f64).cos())
                .collect()
        })
        .collect()
}

/// Separable oversampled-DCT dictionary: each atom is a product of 1D
/// cosine vectors on an oversampled frequency grid, mean-removed except
/// the DC atom, then unit-normalized. Deterministic.
pub fn dct_init(patch_shape: (usize, usize, usize), k: usize) -> Result<Dictionary> {
    let (pz, py, px) = patch_shape;
    let m = pz * py * px;
    if k < m {
        return Err(DenoiseError::NotFactorizable { k, patch: patch_shape });
    }
    let (kz, ky, kx) = factorize(k, patch_shape)
        .ok_or(DenoiseError::NotFactorizable { k, patch: patch_shape })?;
    let tz = cosine_table(pz, kz);
    let ty = cosine_table(py, ky);
    let tx = cosine_table(px, kx);
    let mut atoms = DMatrix::<f64>::zeros(m, k);
    let mut col = 0;
    for fz in 0..kz {
        for fy in 0..ky {
            for fx in 0..kx {
                let mut v = DVector::<f64>::zeros(m);
                let mut idx = 0;
                for z in 0..pz {
                    for y in 0..py {
                        for x in 0..px {
                            v[idx] = tz[fz][z] * ty[fy][y] * tx[fx][x];
                            idx += 1;
                        }
                    }
                }
                if fz + fy + fx > 0 {
                    let mean = v.mean();
                    v.add_scalar_mut(-mean);
                }
                let norm = v.norm();
                if norm < 1e-12 {
                    return Err(DenoiseError::NotFactorizable { k, patch: patch_shape });
                }
                v /= norm;
                atoms.set_column(col, &v);
                col += 1;
            }
        }
    }
    Dictionary::new(atoms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dct_256_atoms_unit_norm() {
        let d = dct_init((1, 8, 8), 256).unwrap();
        assert_eq!(d.m(), 64);
        assert_eq!(d.k(), 256);
        assert!(d.max_norm_error() < 1e-10);
    }

    #[test]
    fn dc_atom_is_constant() {
        let d = dct_init((1, 8, 8), 256).unwrap();
        let expect = 1.0 / 8.0; // 1 / sqrt(64)
        for v in d.atom(0).iter() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn atoms_pairwise_distinct() {
        // Off-diagonal Gram entries strictly below 1 - 1e-9.
        let d = dct_init((1, 8, 8), 256).unwrap();
        let gram = d.atoms().transpose() * d.atoms();
        for i in 0..d.k() {
            for j in 0..d.k() {
                if i != j {
                    assert!(
                        gram[(i, j)].abs() < 1.0 - 1e-9,
                        "atoms {i},{j} inner product {}",
                        gram[(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn factorization_prefers_balanced() {
        assert_eq!(factorize(256, (1, 8, 8)), Some((1, 16, 16)));
        assert_eq!(factorize(512, (4, 8, 8)), Some((4, 8, 16)));
        assert_eq!(factorize(7, (1, 8, 8)), None);
    }

    #[test]
    fn three_d_dct_init() {
        let d = dct_init((4, 8, 8), 512).unwrap();
        assert_eq!(d.m(), 256);
        assert_eq!(d.k(), 512);
        assert!(d.max_norm_error() < 1e-10);
    }

    #[test]
    fn not_factorizable_reported() {
        assert!(matches!(
            dct_init((1, 8, 8), 100), // 100 = 2*50, 4*25, 10*10 < 8 per axis? 10 >= 8 actually
            Ok(_)
        ));
        assert!(matches!(
            dct_init((1, 8, 8), 66),
            Err(DenoiseError::NotFactorizable { .. })
        ));
    }

    #[test]
    fn serialization_round_trip_bit_exact() {
        let d = dct_init((1, 4, 4), 64).unwrap();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        let back = Dictionary::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(d.atoms(), back.atoms());
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut buf = Vec::new();
        dct_init((1, 4, 4), 16).unwrap().write_to(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            Dictionary::read_from(&mut buf.as_slice()),
            Err(DenoiseError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_body_rejected() {
        let mut buf = Vec::new();
        dct_init((1, 4, 4), 16).unwrap().write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(matches!(
            Dictionary::read_from(&mut buf.as_slice()),
            Err(DenoiseError::TruncatedBody { .. })
        ));
    }
}
