use crate::error::{ConfigViolation, DenoiseError, Result};
use crate::patch::PatchGrid;
use crate::volume::ImageVolume;

/// All tunables of the denoising loop. The regularization weights follow
/// the sensitivity sweep of the method (lambda = 0.5, mu = 1); everything
/// else is artifact configuration with desk-scale friendly defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseConfig {
    /// Data-term weight of the residue-coupled dictionary refit.
    pub lambda: f64,
    /// Sparsity regularization weight; enters OMP through the residual
    /// stopping threshold `eps = mu * sigma_hat * sqrt(m)`.
    pub mu: f64,
    /// Max atoms per sparse code (s).
    pub sparsity: usize,
    /// Dictionary atom count (k).
    pub dict_atoms: usize,
    /// Outer DL/RL fusion iterations.
    pub outer_iters: usize,
    /// Relative change of the fused residue that stops the outer loop early.
    pub outer_tol: f64,
    /// Residue network depth (t).
    pub net_depth: usize,
    /// Channels per hidden conv layer.
    pub net_filters: usize,
    /// Adam epochs per outer iteration.
    pub net_epochs: usize,
    /// Minibatch size for net training.
    pub net_batch: usize,
    /// Adam learning rate.
    pub learning_rate: f64,
    /// K-SVD sweeps per dictionary update.
    pub ksvd_sweeps: usize,
    /// Cap on patches sampled per training epoch (0 = no cap).
    pub train_patch_cap: usize,
    /// Patch edge length n (patches are n x n in-plane).
    pub patch_n: usize,
    /// Patch depth q (1 = 2D processing).
    pub patch_q: usize,
    /// Per-axis stride (x, y, z); 0 means half the patch extent.
    pub stride: (usize, usize, usize),
    /// Operator-supplied noise scale; None = robust MAD estimate.
    pub noise_sigma: Option<f64>,
    pub rng_seed: u64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            mu: 1.0,
            sparsity: 4,
            dict_atoms: 256,
            outer_iters: 3,
            outer_tol: 1e-3,
            net_depth: 14,
            net_filters: 84,
            net_epochs: 3,
            net_batch: 32,
            learning_rate: 1e-3,
            ksvd_sweeps: 5,
            train_patch_cap: 512,
            patch_n: 8,
            patch_q: 1,
            stride: (0, 0, 0),
            noise_sigma: None,
            rng_seed: 0,
        }
    }
}

impl DenoiseConfig {
    /// Patch shape in `(z, y, x)` axis order.
    pub fn patch_shape(&self) -> (usize, usize, usize) {
        (self.patch_q, self.patch_n, self.patch_n)
    }

    /// Stride in `(z, y, x)` axis order, with 0 entries replaced by half
    /// the patch extent (minimum 1).
    pub fn resolved_stride(&self) -> (usize, usize, usize) {
        let half = |p: usize| (p / 2).max(1);
        let (sx, sy, sz) = self.stride;
        (
            if sz == 0 { half(self.patch_q) } else { sz },
            if sy == 0 { half(self.patch_n) } else { sy },
            if sx == 0 { half(self.patch_n) } else { sx },
        )
    }

    /// Vectorized patch length m.
    pub fn patch_len(&self) -> usize {
        self.patch_n * self.patch_n * self.patch_q
    }
}

/// Checks every invariant and returns the full list of violations, not
/// just the first one.
pub fn validate_config(
    cfg: &DenoiseConfig,
    vol: &ImageVolume,
    grid: &PatchGrid,
) -> Result<()> {
    let mut violations = Vec::new();
    if !(cfg.lambda > 0.0) {
        violations.push(ConfigViolation::NonPositiveParameter {
            name: "lambda",
            value: cfg.lambda,
        });
    }
    if cfg.mu < 0.0 {
        violations.push(ConfigViolation::NonPositiveParameter {
            name: "mu",
            value: cfg.mu,
        });
    }
    if cfg.sparsity == 0 {
        violations.push(ConfigViolation::NonPositiveParameter {
            name: "sparsity",
            value: 0.0,
        });
    }
    if cfg.sparsity > cfg.dict_atoms {
        violations.push(ConfigViolation::SparsityExceedsAtoms {
            sparsity: cfg.sparsity,
            atoms: cfg.dict_atoms,
        });
    }
    if cfg.net_depth < 3 {
        violations.push(ConfigViolation::NonPositiveParameter {
            name: "net_depth (>= 3)",
            value: cfg.net_depth as f64,
        });
    }
    for (name, v) in [
        ("dict_atoms", cfg.dict_atoms),
        ("outer_iters", cfg.outer_iters),
        ("net_filters", cfg.net_filters),
        ("patch_n", cfg.patch_n),
        ("patch_q", cfg.patch_q),
    ] {
        if v == 0 {
            violations.push(ConfigViolation::NonPositiveParameter {
                name,
                value: 0.0,
            });
        }
    }
    let patch = grid.patch_shape();
    let dim = vol.dim();
    if patch.0 > dim.0 || patch.1 > dim.1 || patch.2 > dim.2 {
        violations.push(ConfigViolation::PatchLargerThanVolume {
            patch,
            volume: dim,
        });
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(DenoiseError::InvalidConfig(violations))
    }
}
