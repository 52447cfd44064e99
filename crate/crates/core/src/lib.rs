//! Unsupervised medical-image denoising: K-SVD patch dictionaries fused
//! with a small residual conv net. The pipeline alternates a sparse-
//! coding branch (OMP + K-SVD) and a learned residue branch, averages
//! their per-patch noise estimates pixel-by-pixel, and feeds the fused
//! residue back into a coupled dictionary refit before reconstructing.

pub mod config;
pub mod dict;
pub mod error;
pub mod io;
pub mod ksvd;
pub mod metrics;
pub mod net;
pub mod noise;
pub mod omp;
pub mod patch;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod volume;

pub use config::{validate_config, DenoiseConfig};
pub use dict::{dct_init, Dictionary};
pub use error::{ConfigViolation, DenoiseError, Result};
pub use ksvd::{ksvd_update, residue_coupled_refit, KsvdTrace};
pub use metrics::{psnr, rmse, ssim, MetricReport};
pub use net::{net_init, train_epoch, NetParams, NetSpec, TrainState};
pub use noise::{add_poisson, add_rician, estimate_sigma, PoissonParams, RicianParams};
pub use omp::{batch_encode, omp_encode, reconstruct, EncodeOptions, SparseCode};
pub use patch::{assemble, decompose, make_grid, PatchGrid, PatchSet};
pub use phantom::{mri_phantom, shepp_logan};
pub use pipeline::{
    denoise_stack, denoise_volume, denoise_volume_with_dictionary, dl_residue, fuse,
    optimal_residue, rl_residue, PipelineReport, ResidueKind, ResidueMap,
};
pub use volume::{ImageVolume, Modality};
