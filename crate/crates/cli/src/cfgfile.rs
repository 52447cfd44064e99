//! Flat key=value config files mirroring `DenoiseConfig`. Missing keys
//! keep their documented defaults (the denoise report echoes the full
//! effective configuration); unknown keys are rejected.

use resfuse_core::DenoiseConfig;

pub fn parse(text: &str) -> Result<DenoiseConfig, String> {
    let mut cfg = DenoiseConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value, got {:?}", lineno + 1, line))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |e: &dyn std::fmt::Display| format!("line {}: {key}: {e}", lineno + 1);
        macro_rules! set {
            ($field:ident, $ty:ty) => {
                cfg.$field = value.parse::<$ty>().map_err(|e| bad(&e))?
            };
        }
        match key {
            "lambda" => set!(lambda, f64),
            "mu" => set!(mu, f64),
            "sparsity" => set!(sparsity, usize),
            "dict_atoms" => set!(dict_atoms, usize),
            "outer_iters" => set!(outer_iters, usize),
            "outer_tol" => set!(outer_tol, f64),
            "net_depth" => set!(net_depth, usize),
            "net_filters" => set!(net_filters, usize),
            "net_epochs" => set!(net_epochs, usize),
            "net_batch" => set!(net_batch, usize),
            "learning_rate" => set!(learning_rate, f64),
            "ksvd_sweeps" => set!(ksvd_sweeps, usize),
            "train_patch_cap" => set!(train_patch_cap, usize),
            "patch_n" => set!(patch_n, usize),
            "patch_q" => set!(patch_q, usize),
            "rng_seed" => set!(rng_seed, u64),
            "stride" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(bad(&"expected sx,sy,sz"));
                }
                let mut s = [0usize; 3];
                for (slot, p) in s.iter_mut().zip(&parts) {
                    *slot = p.parse::<usize>().map_err(|e| bad(&e))?;
                }
                cfg.stride = (s[0], s[1], s[2]);
            }
            "noise_sigma" => {
                cfg.noise_sigma = if value == "auto" {
                    None
                } else {
                    Some(value.parse::<f64>().map_err(|e| bad(&e))?)
                };
            }
            other => return Err(format!("line {}: unknown key {other:?}", lineno + 1)),
        }
    }
    Ok(cfg)
}
