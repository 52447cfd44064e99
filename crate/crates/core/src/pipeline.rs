//! The full denoising loop: dictionary residue, network residue,
//! pixel-wise fusion, residue-coupled dictionary feedback, and the final
//! optimum-residue reconstruction of the volume.

use ndarray::Array3;
use rayon::prelude::*;

use crate::config::{validate_config, DenoiseConfig};
use crate::dict::{dct_init, Dictionary};
use crate::error::Result;
use crate::ksvd::{ksvd_update, residue_coupled_refit};
use crate::net::{net_init, predict, train_epoch, NetParams, NetSpec, TrainState};
use crate::noise::estimate_sigma;
use crate::omp::{batch_encode, devectorize, reconstruct, EncodeOptions, SparseCode};
use crate::patch::{assemble, decompose, make_grid, PatchSet};
use crate::rng::split;
use crate::volume::ImageVolume;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidueKind {
    R1,
    R2,
    Ravg,
    Ropt,
}

/// Per-patch residue tensors. R1, Ravg, and Ropt are magnitude maps and
/// must be elementwise >= 0; R2 is a raw network output and may be any
/// sign until fusion clamps it.
#[derive(Debug, Clone)]
pub struct ResidueMap {
    pub kind: ResidueKind,
    pub tensors: Vec<Array3<f64>>,
}

impl ResidueMap {
    fn assert_invariants(&self) {
        debug_assert!(self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite())));
        if !matches!(self.kind, ResidueKind::R2) {
            debug_assert!(self.tensors.iter().all(|t| t.iter().all(|&v| v >= 0.0)));
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.mapv(|v| v * v).sum())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    pub index: usize,
    /// Sum_j ||P_j - D a_j||^2 at the start of the iteration.
    pub dl_error: f64,
    pub rl_losses: Vec<f64>,
    /// ||R_avg - R_avg_prev||_F / ||R_avg||_F (1.0 on the first iteration).
    pub residue_change: f64,
    /// Sum_j ||R_avg_j - R1_j||^2_F, the coupling term the refit drives down.
    pub coupling: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineReport {
    pub iterations: Vec<IterationStats>,
    pub sigma_used: f64,
    pub coupling_monotone: bool,
}

impl PipelineReport {
    /// Line-delimited key=value rendering, one line per iteration, with
    /// the effective configuration echoed up front.
    pub fn to_text(&self, cfg: &DenoiseConfig) -> String {
        let mut out = String::new();
        let (sz, sy, sx) = cfg.resolved_stride();
        for (k, v) in [
            ("lambda", cfg.lambda.to_string()),
            ("mu", cfg.mu.to_string()),
            ("sparsity", cfg.sparsity.to_string()),
            ("dict_atoms", cfg.dict_atoms.to_string()),
            ("outer_iters", cfg.outer_iters.to_string()),
            ("outer_tol", cfg.outer_tol.to_string()),
            ("net_depth", cfg.net_depth.to_string()),
            ("net_filters", cfg.net_filters.to_string()),
            ("net_epochs", cfg.net_epochs.to_string()),
            ("net_batch", cfg.net_batch.to_string()),
            ("learning_rate", cfg.learning_rate.to_string()),
            ("ksvd_sweeps", cfg.ksvd_sweeps.to_string()),
            ("train_patch_cap", cfg.train_patch_cap.to_string()),
            ("patch_n", cfg.patch_n.to_string()),
            ("patch_q", cfg.patch_q.to_string()),
            ("stride", format!("{sx},{sy},{sz}")),
            ("rng_seed", cfg.rng_seed.to_string()),
            ("sigma_used", self.sigma_used.to_string()),
        ] {
            out.push_str(&format!("config.{k}={v}\n"));
        }
        for it in &self.iterations {
            let mean_loss = if it.rl_losses.is_empty() {
                0.0
            } else {
                it.rl_losses.iter().sum::<f64>() / it.rl_losses.len() as f64
            };
            out.push_str(&format!(
                "iter={} dl_error={:.6e} rl_loss={:.6e} residue_change={:.6e} coupling={:.6e}\n",
                it.index, it.dl_error, mean_loss, it.residue_change, it.coupling
            ));
        }
        out.push_str(&format!("coupling_monotone={}\n", self.coupling_monotone));
        out
    }
}

/// R1_j = |P_j - D a_j| elementwise.
pub fn dl_residue(dict: &Dictionary, ps: &PatchSet, codes: &[SparseCode]) -> Result<ResidueMap> {
    let shape = ps.grid.patch_shape();
    let tensors = ps
        .patches
        .par_iter()
        .zip(codes.par_iter())
        .map(|(p, code)| {
            let recon = devectorize(&reconstruct(dict, code)?, shape);
            Ok((p - &recon).mapv(f64::abs))
        })
        .collect::<Result<Vec<_>>>()?;
    let map = ResidueMap {
        kind: ResidueKind::R1,
        tensors,
    };
    map.assert_invariants();
    Ok(map)
}

/// R2_j = net(P_j) in eval mode; raw (possibly signed) network output.
pub fn rl_residue(params: &NetParams, ps: &PatchSet) -> Result<ResidueMap> {
    let tensors = ps
        .patches
        .par_iter()
        .map(|p| predict(params, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(ResidueMap {
        kind: ResidueKind::R2,
        tensors,
    })
}

/// R_avg_j = (R1_j + max(R2_j, 0)) / 2, pixel by pixel.
pub fn fuse(r1: &ResidueMap, r2: &ResidueMap) -> ResidueMap {
    assert_eq!(r1.tensors.len(), r2.tensors.len());
    let tensors = r1
        .tensors
        .iter()
        .zip(&r2.tensors)
        .map(|(a, b)| {
            let mut t = a.clone();
            t.zip_mut_with(b, |x, &y| *x = (*x + y.max(0.0)) / 2.0);
            t
        })
        .collect();
    let map = ResidueMap {
        kind: ResidueKind::Ravg,
        tensors,
    };
    map.assert_invariants();
    map
}

/// Re-encodes the original patches against the post-feedback dictionary:
/// R_opt_j = |P_j - D a_hat_j|. Returns the codes alongside the map.
pub fn optimal_residue(
    dict: &Dictionary,
    ps: &PatchSet,
    opts: &EncodeOptions,
) -> Result<(ResidueMap, Vec<SparseCode>)> {
    let codes = batch_encode(dict, ps, opts)?;
    let mut map = dl_residue(dict, ps, &codes)?;
    map.kind = ResidueKind::Ropt;
    Ok((map, codes))
}

/// X_opt_j = |P_j - R_opt_j|, clamped to [0, intensity_max].
pub fn denoise_patch(p: &Array3<f64>, r_opt: &Array3<f64>, intensity_max: f64) -> Array3<f64> {
    let mut out = p - r_opt;
    out.mapv_inplace(|v| v.abs().clamp(0.0, intensity_max));
    out
}

fn sample_indices(n: usize, cap: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    if cap > 0 && cap < n {
        idx.shuffle(rng);
        idx.truncate(cap);
        idx.sort_unstable();
    }
    idx
}

/// The end-to-end loop. Within each outer iteration: sparse-code the
/// patches, take the dictionary residue R1, train the residue net on
/// (P_j -> R1_j), fuse with the net's residue R2, and feed the fused
/// residue back into a coupled dictionary refit. After the loop the
/// refit dictionary re-encodes the original patches; each patch is
/// replaced by its clamped sparse reconstruction |D a_hat_j| and the
/// volume reassembled by averaging.
pub fn denoise_volume(
    vol: &ImageVolume,
    cfg: &DenoiseConfig,
) -> Result<(ImageVolume, PipelineReport)> {
    let (out, report, _) = denoise_volume_with_dictionary(vol, cfg)?;
    Ok((out, report))
}

/// Like [`denoise_volume`], but also hands back the learned dictionary
/// (for mosaic export and inspection).
pub fn denoise_volume_with_dictionary(
    vol: &ImageVolume,
    cfg: &DenoiseConfig,
) -> Result<(ImageVolume, PipelineReport, Dictionary)> {
    let grid = make_grid(vol.dim(), cfg.patch_shape(), cfg.resolved_stride())
        .map_err(|e| e.at_stage("grid", None))?;
    validate_config(cfg, vol, &grid)?;
    let ps = decompose(vol, &grid).map_err(|e| e.at_stage("decompose", None))?;
    let m = cfg.patch_len();
    let sigma = cfg.noise_sigma.unwrap_or_else(|| estimate_sigma(vol));
    let opts = EncodeOptions::from_config(cfg, sigma, m);

    let mut dict =
        dct_init(cfg.patch_shape(), cfg.dict_atoms).map_err(|e| e.at_stage("dct_init", None))?;
    let mut codes =
        batch_encode(&dict, &ps, &opts).map_err(|e| e.at_stage("batch_encode", None))?;
    ksvd_update(&mut dict, &ps, &mut codes, cfg.ksvd_sweeps, &opts)
        .map_err(|e| e.at_stage("ksvd_update", None))?;

    let spec = NetSpec::for_patch(cfg.net_depth, cfg.net_filters, cfg.patch_shape())
        .map_err(|e| e.at_stage("net_init", None))?;
    let mut params = net_init(&spec, cfg.rng_seed.wrapping_add(1))
        .map_err(|e| e.at_stage("net_init", None))?;
    let mut state = TrainState::new(
        &spec,
        cfg.learning_rate,
        cfg.net_batch,
        cfg.rng_seed.wrapping_add(2),
    );

    let mut report = PipelineReport {
        sigma_used: sigma,
        coupling_monotone: true,
        ..Default::default()
    };
    let mut prev_avg: Option<ResidueMap> = None;
    let mut prev_coupling = f64::INFINITY;

    for iter in 0..cfg.outer_iters {
        let r1 = dl_residue(&dict, &ps, &codes).map_err(|e| e.at_stage("dl_residue", None))?;
        let dl_error = r1
            .tensors
            .iter()
            .map(|t| t.mapv(|v| v * v).sum())
            .sum::<f64>();

        // Train the net on the DL residue as pseudo-label.
        let mut sample_rng = split(cfg.rng_seed, 10 + iter as u64);
        let idx = sample_indices(ps.patches.len(), cfg.train_patch_cap, &mut sample_rng);
        let train_p: Vec<Array3<f64>> = idx.iter().map(|&i| ps.patches[i].clone()).collect();
        let train_t: Vec<Array3<f64>> = idx.iter().map(|&i| r1.tensors[i].clone()).collect();
        let mut losses = Vec::with_capacity(cfg.net_epochs);
        for _ in 0..cfg.net_epochs {
            let loss = train_epoch(&mut params, &mut state, &train_p, &train_t)
                .map_err(|e| e.at_stage("train_epoch", None))?;
            losses.push(loss);
        }

        let r2 = rl_residue(&params, &ps).map_err(|e| e.at_stage("rl_residue", None))?;
        let r_avg = fuse(&r1, &r2);

        let coupling = r_avg
            .tensors
            .iter()
            .zip(&r1.tensors)
            .map(|(a, b)| (a - b).mapv(|v| v * v).sum())
            .sum::<f64>();
        if coupling > prev_coupling + 1e-9 {
            report.coupling_monotone = false;
        }
        prev_coupling = coupling;

        let residue_change = match &prev_avg {
            None => 1.0,
            Some(prev) => {
                let diff: f64 = r_avg
                    .tensors
                    .iter()
                    .zip(&prev.tensors)
                    .map(|(a, b)| (a - b).mapv(|v| v * v).sum())
                    .sum();
                let norm = r_avg.frobenius_norm();
                if norm > 0.0 {
                    diff.sqrt() / norm
                } else {
                    0.0
                }
            }
        };
        report.iterations.push(IterationStats {
            index: iter + 1,
            dl_error,
            rl_losses: losses,
            residue_change,
            coupling,
        });

        let converged = prev_avg.is_some() && residue_change < cfg.outer_tol;
        prev_avg = Some(r_avg);
        if converged {
            break;
        }

        let r_avg_ref = prev_avg.as_ref().unwrap();
        codes = residue_coupled_refit(&mut dict, &ps, &r_avg_ref.tensors, cfg, &opts)
            .map_err(|e| e.at_stage("residue_coupled_refit", None))?;
    }

    let (_r_opt, final_codes) =
        optimal_residue(&dict, &ps, &opts).map_err(|e| e.at_stage("optimal_residue", None))?;
    let shape = ps.grid.patch_shape();
    let max = ps.intensity_max;
    let denoised_patches: Vec<Array3<f64>> = ps
        .patches
        .par_iter()
        .zip(final_codes.par_iter())
        .map(|(_, code)| {
            let mut recon = devectorize(&reconstruct(&dict, code)?, shape);
            recon.mapv_inplace(|v| v.abs().clamp(0.0, max));
            Ok(recon)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at_stage("denoise_patch", None))?;
    let out_set = PatchSet {
        grid: ps.grid.clone(),
        patches: denoised_patches,
        intensity_max: max,
        modality: ps.modality,
    };
    let out = assemble(&out_set).map_err(|e| e.at_stage("assemble", None))?;
    Ok((out.clamped(), report, dict))
}

/// Maps `denoise_volume` over a stack of images, preserving order; each
/// item carries its own result so one failure does not abort the rest.
pub fn denoise_stack(
    stack: &[ImageVolume],
    cfg: &DenoiseConfig,
) -> Vec<Result<(ImageVolume, PipelineReport)>> {
    stack.iter().map(|v| denoise_volume(v, cfg)).collect()
}
