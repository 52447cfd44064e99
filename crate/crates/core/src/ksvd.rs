//! K-SVD dictionary update: per-atom rank-1 refits of the restricted
//! error matrix, with re-encoding after every full sweep.

use nalgebra::{DMatrix, DVector};
use ndarray::Array3;

use crate::config::DenoiseConfig;
use crate::dict::Dictionary;
use crate::error::{DenoiseError, Result};
use crate::omp::{batch_encode, vectorize, EncodeOptions, SparseCode};
use crate::patch::PatchSet;

/// Objective trace of one `ksvd_update` call: for each sweep, the total
/// representation error sum_j ||P_j - D a_j||^2 before the first atom
/// update and after each atom update. Supports are fixed within a sweep,
/// so each trace must be non-increasing.
#[derive(Debug, Clone, Default)]
pub struct KsvdTrace {
    pub sweeps: Vec<Vec<f64>>,
}

struct SweepState {
    /// Residual columns P_j - D a_j.
    residuals: Vec<DVector<f64>>,
    norms2: Vec<f64>,
}

impl SweepState {
    fn new(dict: &Dictionary, patches: &[DVector<f64>], codes: &[SparseCode]) -> Self {
        let residuals: Vec<DVector<f64>> = patches
            .iter()
            .zip(codes)
            .map(|(p, code)| {
                let mut r = p.clone();
                for (&i, &c) in code.support.iter().zip(&code.coeffs) {
                    r.axpy(-c, &dict.atom(i).clone_owned(), 1.0);
                }
                r
            })
            .collect();
        let norms2 = residuals.iter().map(|r| r.norm_squared()).collect();
        Self { residuals, norms2 }
    }

    fn objective(&self) -> f64 {
        self.norms2.iter().sum()
    }
}

fn coeff_position(code: &SparseCode, atom: usize) -> Option<usize> {
    code.support.iter().position(|&i| i == atom)
}

/// One dictionary update: `sweeps` passes over the atoms in index order.
/// Atoms used by no patch are replaced with the unit-normalized
/// worst-represented patch (largest residual, ties to the lowest patch
/// index); all others take the dominant left singular vector of their
/// restricted error matrix, with the matching coefficients overwritten.
/// Codes are refreshed with `batch_encode` after every sweep.
pub fn ksvd_update(
    dict: &mut Dictionary,
    ps: &PatchSet,
    codes: &mut Vec<SparseCode>,
    sweeps: usize,
    opts: &EncodeOptions,
) -> Result<KsvdTrace> {
    let patches: Vec<DVector<f64>> = ps.patches.iter().map(vectorize).collect();
    let k = dict.k();
    let mut trace = KsvdTrace::default();
    for _sweep in 0..sweeps {
        let mut state = SweepState::new(dict, &patches, codes);
        let mut usage = vec![0u32; k];
        // Each worst-represented patch replaces at most one unused atom
        // per sweep, otherwise every unused atom becomes the same
        // (duplicate) column.
        let mut taken = vec![false; patches.len()];
        let mut objective = state.objective();
        let mut sweep_trace = vec![objective];
        for atom in 0..k {
            let users: Vec<(usize, usize)> = codes
                .iter()
                .enumerate()
                .filter_map(|(j, code)| coeff_position(code, atom).map(|pos| (j, pos)))
                .collect();
            usage[atom] = users.len() as u32;
            if users.is_empty() {
                // Replace with the worst-represented patch; keeps the
                // objective unchanged because no coefficient uses it.
                let mut worst = None;
                for j in 0..state.norms2.len() {
                    if taken[j] {
                        continue;
                    }
                    if worst.map_or(true, |w: usize| state.norms2[j] > state.norms2[w]) {
                        worst = Some(j);
                    }
                }
                if let Some(worst) = worst {
                    if state.norms2[worst] > 1e-12 {
                        let p = &patches[worst];
                        let norm = p.norm();
                        if norm > 1e-12 {
                            dict.set_atom(atom, &(p / norm));
                            taken[worst] = true;
                        }
                    }
                }
            } else {
                // Restricted error matrix: residuals of the users with
                // this atom's contribution added back.
                let m = dict.m();
                let mut err = DMatrix::<f64>::zeros(m, users.len());
                let atom_col = dict.atom(atom).clone_owned();
                for (c, &(j, pos)) in users.iter().enumerate() {
                    let mut col = state.residuals[j].clone();
                    col.axpy(codes[j].coeffs[pos], &atom_col, 1.0);
                    err.set_column(c, &col);
                }
                let svd = err
                    .clone()
                    .try_svd(true, true, 1e-13, 10_000)
                    .ok_or(DenoiseError::SvdFailure { atom })?;
                let (mut top, mut top_sigma) = (0usize, 0.0f64);
                for (i, &s) in svd.singular_values.iter().enumerate() {
                    if s > top_sigma {
                        top_sigma = s;
                        top = i;
                    }
                }
                let u = svd.u.as_ref().ok_or(DenoiseError::SvdFailure { atom })?;
                let vt = svd.v_t.as_ref().ok_or(DenoiseError::SvdFailure { atom })?;
                let mut new_atom = u.column(top).clone_owned();
                let mut right = vt.row(top).transpose().clone_owned();
                // Deterministic sign: largest-magnitude entry positive.
                let mut lead = 0usize;
                for i in 1..new_atom.len() {
                    if new_atom[i].abs() > new_atom[lead].abs() {
                        lead = i;
                    }
                }
                if new_atom[lead] < 0.0 {
                    new_atom.neg_mut();
                    right.neg_mut();
                }
                dict.set_atom(atom, &new_atom);
                for (c, &(j, pos)) in users.iter().enumerate() {
                    let coeff = top_sigma * right[c];
                    codes[j].coeffs[pos] = coeff;
                    let mut col = err.column(c).clone_owned();
                    col.axpy(-coeff, &new_atom, 1.0);
                    state.norms2[j] = col.norm_squared();
                    state.residuals[j] = col;
                }
                let new_objective = state.objective();
                debug_assert!(
                    new_objective <= objective + 1e-9,
                    "K-SVD objective increased at atom {atom}: {objective} -> {new_objective}"
                );
                objective = new_objective;
            }
            sweep_trace.push(objective);
        }
        dict.set_usage(usage);
        trace.sweeps.push(sweep_trace);
        *codes = batch_encode(dict, ps, opts)?;
    }
    Ok(trace)
}

/// Residue-coupled dictionary refit: rebuilds the dictionary against the
/// pseudo-clean targets `T_j = clamp(P_j - R_avg_j)`, driving the
/// dictionary residue toward the fused residue. Returns the codes of the
/// targets under the refit dictionary.
pub fn residue_coupled_refit(
    dict: &mut Dictionary,
    ps: &PatchSet,
    r_avg: &[Array3<f64>],
    cfg: &DenoiseConfig,
    opts: &EncodeOptions,
) -> Result<Vec<SparseCode>> {
    debug_assert_eq!(ps.patches.len(), r_avg.len());
    let max = ps.intensity_max;
    let targets = PatchSet {
        grid: ps.grid.clone(),
        patches: ps
            .patches
            .iter()
            .zip(r_avg)
            .map(|(p, r)| {
                let mut t = p - r;
                t.mapv_inplace(|v| v.clamp(0.0, max));
                t
            })
            .collect(),
        intensity_max: max,
        modality: ps.modality,
    };
    // The targets are pseudo-clean: the fused residue has already been
    // subtracted, so the noise-scaled stopping threshold of the outer
    // encode would leave noise-sized representation error and break the
    // residue tracking the refit exists for. Tighten it by the data-term
    // weight.
    let refit_opts = EncodeOptions {
        eps: cfg.lambda * opts.eps,
        ..*opts
    };
    let mut codes = batch_encode(dict, &targets, &refit_opts)?;
    ksvd_update(dict, &targets, &mut codes, cfg.ksvd_sweeps, &refit_opts)?;
    Ok(codes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dict::dct_init;
    use crate::patch::{make_grid, PatchSet};
    use crate::volume::Modality;
    use nalgebra::DMatrix;
    use ndarray::Array3;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn patch_set_from(patches: Vec<Array3<f64>>, shape: (usize, usize, usize)) -> PatchSet {
        // Only the patch list matters for the dictionary code paths, so a
        // trivial one-origin grid is good enough here.
        PatchSet {
            grid: make_grid(shape, shape, (1, 1, 1)).unwrap(),
            patches,
            intensity_max: 255.0,
            modality: Modality::Synthetic,
        }
    }

    fn objective(dict: &Dictionary, ps: &PatchSet, codes: &[SparseCode]) -> f64 {
        SweepState::new(
            dict,
            &ps.patches.iter().map(vectorize).collect::<Vec<_>>(),
            codes,
        )
        .objective()
    }

    #[test]
    fn single_patch_error_non_increasing() {
        let mut dict = dct_init((1, 4, 4), 16).unwrap();
        let mut rng = crate::rng::seeded(4);
        let patch = Array3::from_shape_fn((1, 4, 4), |_| rng.gen_range(0.0..1.0));
        let ps = patch_set_from(vec![patch], (1, 4, 4));
        let opts = EncodeOptions { sparsity: 2, eps: 0.0 };
        let mut codes = batch_encode(&dict, &ps, &opts).unwrap();
        let before = objective(&dict, &ps, &codes);
        let trace = ksvd_update(&mut dict, &ps, &mut codes, 1, &opts).unwrap();
        let within = &trace.sweeps[0];
        assert!(within.last().unwrap() <= &(before + 1e-9));
        for w in within.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        assert!(dict.max_norm_error() < 1e-10);
    }

    #[test]
    fn planted_dictionary_recovery() {
        // Patches generated exactly as D * alpha from a planted 16x32
        // dictionary must be representable to tiny error after sweeps.
        let mut rng = crate::rng::seeded(8);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut planted = DMatrix::from_fn(16, 32, |_, _| normal.sample(&mut rng));
        for j in 0..32 {
            let n = planted.column(j).norm();
            let col = planted.column(j) / n;
            planted.set_column(j, &col);
        }
        let mut patches = Vec::new();
        for _ in 0..200 {
            let mut p = DVector::<f64>::zeros(16);
            for _ in 0..3 {
                let atom = rng.gen_range(0..32);
                let coeff = rng.gen_range(0.5..2.0f64) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                p.axpy(coeff, &planted.column(atom).clone_owned(), 1.0);
            }
            patches.push(Array3::from_shape_vec((1, 4, 4), p.iter().cloned().collect()).unwrap());
        }
        let ps = patch_set_from(patches, (1, 4, 4));
        let mut dict = dct_init((1, 4, 4), 32).unwrap();
        let opts = EncodeOptions { sparsity: 3, eps: 1e-9 };
        let mut codes = batch_encode(&dict, &ps, &opts).unwrap();
        let before = objective(&dict, &ps, &codes);
        let trace = ksvd_update(&mut dict, &ps, &mut codes, 20, &opts).unwrap();
        let after = objective(&dict, &ps, &codes);
        // Exact recovery from a cold DCT start is not guaranteed (local
        // minima), but the learned dictionary must represent the planted
        // data far better than the initialization, and every within-sweep
        // trace must be monotone.
        assert!(
            after < 0.35 * before,
            "objective only moved {before} -> {after}"
        );
        for sweep in &trace.sweeps {
            for w in sweep.windows(2) {
                assert!(w[1] <= w[0] + 1e-9);
            }
        }
    }

    #[test]
    fn unused_atom_replaced_by_worst_patch() {
        let mut dict = dct_init((1, 4, 4), 16).unwrap();
        let mut rng = crate::rng::seeded(2);
        let patches: Vec<Array3<f64>> = (0..4)
            .map(|_| Array3::from_shape_fn((1, 4, 4), |_| rng.gen_range(0.0..1.0)))
            .collect();
        let ps = patch_set_from(patches.clone(), (1, 4, 4));
        // Codes that never use atom 5 (or any atom): all empty, so every
        // patch is fully unrepresented.
        let mut codes: Vec<SparseCode> = (0..4).map(SparseCode::empty).collect();
        // Find the worst patch (largest norm, since codes are empty).
        let mut worst = 0usize;
        for (j, p) in patches.iter().enumerate() {
            if vectorize(p).norm() > vectorize(&patches[worst]).norm() {
                worst = j;
            }
        }
        let opts = EncodeOptions { sparsity: 1, eps: 0.0 };
        let before = dict.clone();
        ksvd_update(&mut dict, &ps, &mut codes, 1, &opts).unwrap();
        let expect = {
            let v = vectorize(&patches[worst]);
            let n = v.norm();
            v / n
        };
        // The first unused atom takes the worst patch; each patch fills at
        // most one atom, so atoms past the patch count keep their init.
        assert!((dict.atom(0).clone_owned() - expect).norm() < 1e-12);
        assert_eq!(dict.atom(7), before.atom(7));
    }

    #[test]
    fn refit_with_zero_residue_matches_plain_update() {
        let mut rng = crate::rng::seeded(6);
        let patches: Vec<Array3<f64>> = (0..10)
            .map(|_| Array3::from_shape_fn((1, 4, 4), |_| rng.gen_range(0.0..10.0)))
            .collect();
        let ps = patch_set_from(patches.clone(), (1, 4, 4));
        let zeros: Vec<Array3<f64>> = (0..10).map(|_| Array3::zeros((1, 4, 4))).collect();
        let cfg = DenoiseConfig {
            ksvd_sweeps: 2,
            sparsity: 2,
            ..DenoiseConfig::default()
        };
        let opts = EncodeOptions { sparsity: 2, eps: 0.0 };

        let mut d_refit = dct_init((1, 4, 4), 16).unwrap();
        let codes_refit =
            residue_coupled_refit(&mut d_refit, &ps, &zeros, &cfg, &opts).unwrap();

        let mut d_plain = dct_init((1, 4, 4), 16).unwrap();
        let mut codes_plain = batch_encode(&d_plain, &ps, &opts).unwrap();
        ksvd_update(&mut d_plain, &ps, &mut codes_plain, 2, &opts).unwrap();

        assert_eq!(d_refit.atoms(), d_plain.atoms());
        assert_eq!(codes_refit, codes_plain);
    }

    #[test]
    fn refit_with_full_residue_keeps_atoms() {
        // R_avg = P makes every target zero: codes empty, atoms untouched
        // (zero residuals mean no replacement either).
        let mut rng = crate::rng::seeded(12);
        let patches: Vec<Array3<f64>> = (0..5)
            .map(|_| Array3::from_shape_fn((1, 4, 4), |_| rng.gen_range(0.0..10.0)))
            .collect();
        let ps = patch_set_from(patches.clone(), (1, 4, 4));
        let cfg = DenoiseConfig {
            ksvd_sweeps: 1,
            sparsity: 2,
            ..DenoiseConfig::default()
        };
        let opts = EncodeOptions { sparsity: 2, eps: 0.0 };
        let mut dict = dct_init((1, 4, 4), 16).unwrap();
        let before = dict.atoms().clone();
        let codes = residue_coupled_refit(&mut dict, &ps, &patches, &cfg, &opts).unwrap();
        assert!(codes.iter().all(|c| c.is_empty()));
        assert_eq!(dict.atoms(), &before);
    }

    #[test]
    fn refit_reduces_target_representation_error() {
        // The refit minimizes sum ||T_j - D a_j||^2 over the pseudo-clean
        // targets T = clamp(P - R_avg): after one refit the dictionary
        // must represent the targets at least as well as before.
        let mut rng = crate::rng::seeded(31);
        let normal = Normal::new(0.0, 0.5).unwrap();
        let patches: Vec<Array3<f64>> = (0..50)
            .map(|_| {
                let base = rng.gen_range(20.0..200.0);
                Array3::from_shape_fn((1, 4, 4), |_| base + normal.sample(&mut rng))
            })
            .collect();
        let ps = patch_set_from(patches.clone(), (1, 4, 4));
        let cfg = DenoiseConfig {
            ksvd_sweeps: 2,
            sparsity: 2,
            ..DenoiseConfig::default()
        };
        let opts = EncodeOptions { sparsity: 2, eps: 0.8 };
        let mut dict = dct_init((1, 4, 4), 16).unwrap();
        let mut codes = batch_encode(&dict, &ps, &opts).unwrap();
        ksvd_update(&mut dict, &ps, &mut codes, 2, &opts).unwrap();
        let r1: Vec<Array3<f64>> = ps
            .patches
            .iter()
            .zip(&codes)
            .map(|(p, code)| {
                let recon = crate::omp::reconstruct(&dict, code).unwrap();
                let recon = crate::omp::devectorize(&recon, (1, 4, 4));
                (p - &recon).mapv(f64::abs)
            })
            .collect();
        // Synthetic fused residue: dampened R1.
        let r_avg: Vec<Array3<f64>> = r1.iter().map(|r| r * 0.5).collect();
        let targets: Vec<Array3<f64>> = ps
            .patches
            .iter()
            .zip(&r_avg)
            .map(|(p, r)| (p - r).mapv(|v| v.clamp(0.0, 255.0)))
            .collect();
        let target_err = |d: &Dictionary, cs: &[SparseCode]| -> f64 {
            targets
                .iter()
                .zip(cs)
                .map(|(t, code)| {
                    let recon = crate::omp::reconstruct(d, code).unwrap();
                    let recon = crate::omp::devectorize(&recon, (1, 4, 4));
                    (t - &recon).mapv(|v| v * v).sum()
                })
                .sum()
        };
        let tset = PatchSet {
            grid: ps.grid.clone(),
            patches: targets.clone(),
            intensity_max: 255.0,
            modality: Modality::Synthetic,
        };
        let codes_before = batch_encode(&dict, &tset, &opts).unwrap();
        let before = target_err(&dict, &codes_before);
        let mut dict2 = dict.clone();
        let codes_after = residue_coupled_refit(&mut dict2, &ps, &r_avg, &cfg, &opts).unwrap();
        let after = target_err(&dict2, &codes_after);
        assert!(
            after <= before + 1e-9,
            "target representation error increased: {before} -> {after}"
        );
    }
}
