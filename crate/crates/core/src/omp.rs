//! Orthogonal matching pursuit: greedy atom selection with exact
//! least-squares refits on the accumulated support.

use nalgebra::{Cholesky, DMatrix, DVector};
use ndarray::Array3;
use rayon::prelude::*;

use crate::config::DenoiseConfig;
use crate::dict::Dictionary;
use crate::error::{DenoiseError, Result};
use crate::patch::PatchSet;

const GRAM_TOL: f64 = 1e-12;

/// Sparse code of one patch: support indices with aligned least-squares
/// coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    pub support: Vec<usize>,
    pub coeffs: Vec<f64>,
    pub patch_index: usize,
}

impl SparseCode {
    pub fn empty(patch_index: usize) -> Self {
        Self {
            support: Vec::new(),
            coeffs: Vec::new(),
            patch_index,
        }
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }
}

/// OMP stopping parameters: the sparsity cap s and the residual norm
/// threshold eps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodeOptions {
    pub sparsity: usize,
    pub eps: f64,
}

impl EncodeOptions {
    /// Maps the sparsity weight mu onto the OMP residual threshold:
    /// `eps = mu * sigma * sqrt(m)`.
    pub fn from_config(cfg: &DenoiseConfig, sigma: f64, m: usize) -> Self {
        Self {
            sparsity: cfg.sparsity,
            eps: cfg.mu * sigma * (m as f64).sqrt(),
        }
    }
}

/// Flattens a patch in the canonical x-fastest order.
pub fn vectorize(patch: &Array3<f64>) -> DVector<f64> {
    DVector::from_iterator(patch.len(), patch.iter().cloned())
}

pub fn devectorize(v: &DVector<f64>, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_vec(shape, v.iter().cloned().collect()).expect("length matches shape")
}

/// Exact least squares of `p` on the given support via the normal
/// equations. Errors when the Gram submatrix is singular beyond
/// tolerance, which signals (near-)duplicate atoms.
fn solve_support(
    dict: &Dictionary,
    support: &[usize],
    p: &DVector<f64>,
    patch_index: usize,
) -> Result<DVector<f64>> {
    let m = dict.m();
    let n = support.len();
    let mut sub = DMatrix::<f64>::zeros(m, n);
    for (c, &i) in support.iter().enumerate() {
        sub.set_column(c, &dict.atom(i).clone_owned());
    }
    let gram = sub.transpose() * &sub;
    let min_diag = (0..n).map(|i| gram[(i, i)]).fold(f64::INFINITY, f64::min);
    let chol = Cholesky::new(gram)
        .filter(|_| min_diag > GRAM_TOL)
        .ok_or(DenoiseError::DegenerateSupport { patch_index })?;
    let rhs = sub.transpose() * p;
    let x = chol.solve(&rhs);
    // Cholesky of a nearly singular Gram can succeed numerically; check
    // the determinant proxy through the factor diagonal.
    let l = chol.l();
    if (0..n).any(|i| l[(i, i)] * l[(i, i)] <= GRAM_TOL) {
        return Err(DenoiseError::DegenerateSupport { patch_index });
    }
    Ok(x)
}

fn reconstruct_on_support(dict: &Dictionary, support: &[usize], coeffs: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::<f64>::zeros(dict.m());
    for (c, &i) in support.iter().enumerate() {
        out.axpy(coeffs[c], &dict.atom(i).clone_owned(), 1.0);
    }
    out
}

/// Greedy OMP. Each iteration selects the atom with the largest absolute
/// correlation to the residual (ties to the lowest index), re-solves the
/// least squares on the whole support, and updates the residual. Stops at
/// `s` atoms, at `||r|| <= eps`, or when every correlation is exactly 0.
pub fn omp_encode(
    dict: &Dictionary,
    p: &DVector<f64>,
    opts: &EncodeOptions,
    patch_index: usize,
) -> Result<SparseCode> {
    debug_assert_eq!(p.len(), dict.m());
    let mut support: Vec<usize> = Vec::with_capacity(opts.sparsity);
    let mut residual = p.clone();
    let mut coeffs = DVector::<f64>::zeros(0);
    let mut res_norm = residual.norm();
    // Residuals and correlations at the f64 noise floor of the patch
    // magnitude count as zero; chasing them only selects junk atoms.
    let floor = 1e-12 * p.norm();
    while support.len() < opts.sparsity && res_norm > opts.eps.max(floor) {
        let corr = dict.atoms().transpose() * &residual;
        let mut best = usize::MAX;
        let mut best_val = 0.0f64;
        for (i, &c) in corr.iter().enumerate() {
            if support.contains(&i) {
                continue;
            }
            if c.abs() > best_val {
                best_val = c.abs();
                best = i;
            }
        }
        if best == usize::MAX || best_val <= floor {
            break;
        }
        support.push(best);
        coeffs = solve_support(dict, &support, p, patch_index)?;
        residual = p - reconstruct_on_support(dict, &support, &coeffs);
        let new_norm = residual.norm();
        debug_assert!(
            new_norm < res_norm + 1e-12,
            "OMP residual did not decrease: {res_norm} -> {new_norm}"
        );
        res_norm = new_norm;
    }
    Ok(SparseCode {
        support,
        coeffs: coeffs.iter().cloned().collect(),
        patch_index,
    })
}

/// Element-wise OMP over a patch set, order preserved. Each patch is
/// independent, so the parallel map is bitwise deterministic.
pub fn batch_encode(
    dict: &Dictionary,
    ps: &PatchSet,
    opts: &EncodeOptions,
) -> Result<Vec<SparseCode>> {
    ps.patches
        .par_iter()
        .enumerate()
        .map(|(j, patch)| omp_encode(dict, &vectorize(patch), opts, j))
        .collect()
}

/// `sum coeffs[i] * atom[support[i]]`, exact linear combination.
pub fn reconstruct(dict: &Dictionary, code: &SparseCode) -> Result<DVector<f64>> {
    let mut out = DVector::<f64>::zeros(dict.m());
    for (&i, &c) in code.support.iter().zip(&code.coeffs) {
        if i >= dict.k() {
            return Err(DenoiseError::IndexOutOfRange { index: i, k: dict.k() });
        }
        out.axpy(c, &dict.atom(i).clone_owned(), 1.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dict::dct_init;
    use crate::patch::{decompose, make_grid};
    use crate::volume::{ImageVolume, Modality};
    use nalgebra::DMatrix;
    use ndarray::Array3;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn identity_dict(n: usize) -> Dictionary {
        Dictionary::new(DMatrix::identity(n, n)).unwrap()
    }

    fn opts(s: usize, eps: f64) -> EncodeOptions {
        EncodeOptions { sparsity: s, eps }
    }

    #[test]
    fn identity_single_atom() {
        let d = identity_dict(2);
        let p = DVector::from_vec(vec![3.0, 0.0]);
        let code = omp_encode(&d, &p, &opts(1, 0.0), 0).unwrap();
        assert_eq!(code.support, vec![0]);
        assert!((code.coeffs[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn picks_best_single_atom() {
        // Atoms (1,0), (0,1), (1/sqrt2, 1/sqrt2); p = (1,1): the diagonal
        // atom wins with coefficient sqrt(2) and zero residual. Verified
        // against a brute-force scan over all 1-sparse least-squares fits.
        let s = 1.0 / 2.0f64.sqrt();
        let atoms = DMatrix::from_columns(&[
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0]),
            DVector::from_vec(vec![s, s]),
        ]);
        let d = Dictionary::new(atoms).unwrap();
        let p = DVector::from_vec(vec![1.0, 1.0]);
        // brute-force oracle
        let mut best = (usize::MAX, f64::INFINITY);
        for i in 0..d.k() {
            let a = d.atom(i).clone_owned();
            let c = a.dot(&p);
            let r = (&p - a * c).norm();
            if r < best.1 {
                best = (i, r);
            }
        }
        assert_eq!(best.0, 2);
        let code = omp_encode(&d, &p, &opts(1, 0.0), 0).unwrap();
        assert_eq!(code.support, vec![2]);
        assert!((code.coeffs[0] - 2.0f64.sqrt()).abs() < 1e-12);
        let recon = reconstruct(&d, &code).unwrap();
        assert!((p - recon).norm() < 1e-12);
    }

    #[test]
    fn one_sparse_greedy_is_optimal() {
        // At s = 1 OMP must match the best single-atom fit for arbitrary
        // dictionaries; brute-force over all atoms.
        let mut rng = crate::rng::seeded(11);
        for _ in 0..20 {
            let normal = Normal::new(0.0, 1.0).unwrap();
            let mut atoms = DMatrix::from_fn(8, 24, |_, _| normal.sample(&mut rng));
            for j in 0..24 {
                let n = atoms.column(j).norm();
                let col = atoms.column(j) / n;
                atoms.set_column(j, &col);
            }
            let d = Dictionary::new(atoms).unwrap();
            let p = DVector::from_fn(8, |_, _| normal.sample(&mut rng));
            let code = omp_encode(&d, &p, &opts(1, 0.0), 0).unwrap();
            let omp_res = (&p - reconstruct(&d, &code).unwrap()).norm();
            for i in 0..d.k() {
                let a = d.atom(i).clone_owned();
                let r = (&p - &a * a.dot(&p)).norm();
                assert!(omp_res <= r + 1e-12);
            }
        }
    }

    #[test]
    fn exact_recovery_when_spanning() {
        // s = m on a spanning dictionary reproduces the patch.
        let d = dct_init((1, 4, 4), 16).unwrap();
        let mut rng = crate::rng::seeded(3);
        let p = DVector::from_fn(16, |_, _| rng.gen_range(-1.0..1.0f64));
        let code = omp_encode(&d, &p, &opts(16, 0.0), 0).unwrap();
        let recon = reconstruct(&d, &code).unwrap();
        assert!((&p - recon).norm() < 1e-8);
    }

    #[test]
    fn planted_sparse_recovery() {
        // Identity + Hadamard basis union has mutual coherence exactly
        // 1/sqrt(m) = 0.125, below the 1/(2s-1) = 0.2 guarantee for
        // s = 3, so OMP must recover every planted support exactly.
        let m = 64;
        let mut had = DMatrix::<f64>::from_element(1, 1, 1.0);
        while had.nrows() < m {
            let n = had.nrows();
            let mut next = DMatrix::<f64>::zeros(2 * n, 2 * n);
            next.view_mut((0, 0), (n, n)).copy_from(&had);
            next.view_mut((0, n), (n, n)).copy_from(&had);
            next.view_mut((n, 0), (n, n)).copy_from(&had);
            next.view_mut((n, n), (n, n)).copy_from(&(-&had));
            had = next;
        }
        had /= (m as f64).sqrt();
        let mut atoms = DMatrix::<f64>::zeros(m, 2 * m);
        atoms
            .view_mut((0, 0), (m, m))
            .copy_from(&DMatrix::identity(m, m));
        atoms.view_mut((0, m), (m, m)).copy_from(&had);
        let d = Dictionary::new(atoms).unwrap();
        let mut rng = crate::rng::seeded(9);
        for trial in 0..50 {
            let mut support: Vec<usize> = Vec::new();
            while support.len() < 3 {
                let i = rng.gen_range(0..2 * m);
                if !support.contains(&i) {
                    support.push(i);
                }
            }
            support.sort_unstable();
            let coeffs: Vec<f64> = (0..3)
                .map(|_| {
                    let mag = rng.gen_range(1.0..2.0f64);
                    if rng.gen_bool(0.5) {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect();
            let mut p = DVector::<f64>::zeros(m);
            for (&i, &c) in support.iter().zip(&coeffs) {
                p.axpy(c, &d.atom(i).clone_owned(), 1.0);
            }
            let code = omp_encode(&d, &p, &opts(3, 1e-10), trial).unwrap();
            let mut got: Vec<usize> = code.support.clone();
            got.sort_unstable();
            assert_eq!(got, support, "trial {trial}");
            let recon = reconstruct(&d, &code).unwrap();
            assert!((&p - recon).norm() < 1e-8);
        }
    }

    #[test]
    fn zero_patch_gives_empty_code() {
        let d = dct_init((1, 4, 4), 16).unwrap();
        let p = DVector::<f64>::zeros(16);
        let code = omp_encode(&d, &p, &opts(4, 0.0), 0).unwrap();
        assert!(code.is_empty());
    }

    #[test]
    fn empty_code_reconstructs_zero() {
        let d = dct_init((1, 4, 4), 16).unwrap();
        let r = reconstruct(&d, &SparseCode::empty(0)).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_code_reconstruction() {
        let d = identity_dict(4);
        let code = SparseCode {
            support: vec![0],
            coeffs: vec![3.0],
            patch_index: 0,
        };
        let r = reconstruct(&d, &code).unwrap();
        assert_eq!(r.as_slice(), &[3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn out_of_range_index_rejected() {
        let d = identity_dict(4);
        let code = SparseCode {
            support: vec![9],
            coeffs: vec![1.0],
            patch_index: 0,
        };
        assert!(matches!(
            reconstruct(&d, &code),
            Err(DenoiseError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn singular_gram_reports_degenerate_support() {
        let a = DVector::from_vec(vec![1.0, 0.0]);
        let atoms = DMatrix::from_columns(&[a.clone(), a]);
        // Bypass duplicate detection: solve directly on the duplicated
        // support, which has an exactly singular Gram.
        let d = Dictionary::new(atoms).unwrap();
        let p = DVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(
            solve_support(&d, &[0, 1], &p, 7),
            Err(DenoiseError::DegenerateSupport { patch_index: 7 })
        ));
    }

    #[test]
    fn batch_matches_single_and_is_order_stable() {
        let d = dct_init((1, 4, 4), 16).unwrap();
        let mut rng = crate::rng::seeded(21);
        let data = Array3::from_shape_fn((1, 8, 8), |_| rng.gen_range(0.0..255.0));
        let vol = ImageVolume::new(data, 255.0, Modality::Synthetic).unwrap();
        let grid = make_grid(vol.dim(), (1, 4, 4), (1, 2, 2)).unwrap();
        let ps = decompose(&vol, &grid).unwrap();
        let o = opts(4, 1e-6);
        let batch = batch_encode(&d, &ps, &o).unwrap();
        assert_eq!(batch.len(), ps.patches.len());
        for (j, code) in batch.iter().enumerate() {
            let single = omp_encode(&d, &vectorize(&ps.patches[j]), &o, j).unwrap();
            assert_eq!(code, &single);
        }
        // thread-count independence: serial pool vs default pool
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(|| batch_encode(&d, &ps, &o).unwrap());
        assert_eq!(batch, serial);
    }

    #[test]
    fn all_zero_patch_set_empty_codes() {
        let d = dct_init((1, 4, 4), 16).unwrap();
        let vol =
            ImageVolume::new(Array3::zeros((1, 8, 8)), 255.0, Modality::Synthetic).unwrap();
        let grid = make_grid(vol.dim(), (1, 4, 4), (1, 4, 4)).unwrap();
        let ps = decompose(&vol, &grid).unwrap();
        let codes = batch_encode(&d, &ps, &opts(4, 0.0)).unwrap();
        assert!(codes.iter().all(|c| c.is_empty()));
    }
}
