//! `resfuse` command line: noise simulation, denoising, metrics, and the
//! benchmark sweep. Exit codes: 0 success, 2 bad arguments, 3 I/O or
//! file-format failure, 4 numeric failure. Errors go to stderr as a
//! single machine-readable line.

mod bench;
mod cfgfile;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use resfuse_core::io::{read_pgm, read_volume, write_volume};
use resfuse_core::{
    add_poisson, add_rician, denoise_volume, metrics, DenoiseError, ImageVolume, PoissonParams,
    RicianParams,
};

#[derive(Parser)]
#[command(name = "resfuse", version, about = "Unsupervised MRI/CT denoising")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NoiseModel {
    Rician,
    Poisson,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PhantomKind {
    Shepp,
    Mri3d,
}

#[derive(Subcommand)]
enum Command {
    /// Add simulated Rician or Poisson noise to a volume.
    Addnoise {
        #[arg(long)]
        model: NoiseModel,
        /// Noise level in percent (e.g. 5).
        #[arg(long)]
        level: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        input: PathBuf,
        output: PathBuf,
    },
    /// Run the denoising pipeline on a volume.
    Denoise {
        /// Flat key=value config file; missing keys use defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        input: PathBuf,
        output: PathBuf,
        /// Where to write the run report (stdout when omitted).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print PSNR/SSIM/RMSE of a test volume against a reference.
    Metrics { reference: PathBuf, test: PathBuf },
    /// Noise-level sweep on a synthetic phantom, writing a metric table.
    Bench {
        #[arg(long)]
        phantom: PhantomKind,
        /// Comma-separated percent levels, e.g. 5,10,15.
        #[arg(long, value_delimiter = ',')]
        levels: Vec<f64>,
        #[arg(long)]
        model: NoiseModel,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for tables, volumes, and dictionary mosaics.
        #[arg(long)]
        out: PathBuf,
        /// Optional pipeline config overriding the desk-scale defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Phantom edge length.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

pub struct Failure {
    code: i32,
    kind: &'static str,
    msg: String,
}

impl Failure {
    pub fn args(msg: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "args",
            msg: msg.into(),
        }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Self {
            code: 3,
            kind: "io",
            msg: msg.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Self {
            code: 4,
            kind: "numeric",
            msg: msg.into(),
        }
    }

    pub fn from_core(e: DenoiseError) -> Self {
        match &e {
            DenoiseError::Io(_)
            | DenoiseError::BadMagic { .. }
            | DenoiseError::TruncatedBody { .. }
            | DenoiseError::UnsupportedDtype { .. } => Self::io(e.to_string()),
            DenoiseError::InvalidConfig(_) => Self::args(e.to_string()),
            _ => Self::numeric(e.to_string()),
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(f) = dispatch(cli) {
        eprintln!(
            "error code={} kind={} msg=\"{}\"",
            f.code,
            f.kind,
            f.msg.replace('"', "'").replace('\n', "; ")
        );
        std::process::exit(f.code);
    }
}

/// Reads MVOL1, falling back to PGM import for .pgm paths.
pub fn load_volume(path: &PathBuf) -> Result<ImageVolume, Failure> {
    let loader = if path.extension().is_some_and(|e| e == "pgm") {
        read_pgm
    } else {
        read_volume
    };
    loader(path).map_err(Failure::from_core)
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Command::Addnoise {
            model,
            level,
            seed,
            input,
            output,
        } => {
            if !(level > 0.0 && level < 100.0) {
                return Err(Failure::args(format!(
                    "level must be in (0, 100), got {level}"
                )));
            }
            let clean = load_volume(&input)?;
            let noisy = match model {
                NoiseModel::Rician => add_rician(
                    &clean,
                    &RicianParams::from_percent(level, clean.intensity_max()),
                    seed,
                ),
                NoiseModel::Poisson => {
                    add_poisson(&clean, &PoissonParams::from_percent(level), seed)
                        .map_err(Failure::from_core)?
                }
            };
            write_volume(&output, &noisy).map_err(Failure::from_core)?;
            let n = clean.data().len() as f64;
            let mean_diff: f64 = noisy
                .data()
                .iter()
                .zip(clean.data().iter())
                .map(|(a, b)| a - b)
                .sum::<f64>()
                / n;
            let var_diff: f64 = noisy
                .data()
                .iter()
                .zip(clean.data().iter())
                .map(|(a, b)| {
                    let d = a - b - mean_diff;
                    d * d
                })
                .sum::<f64>()
                / n;
            println!(
                "model={} level={} seed={}",
                match model {
                    NoiseModel::Rician => "rician",
                    NoiseModel::Poisson => "poisson",
                },
                level,
                seed
            );
            println!("noise_mean={:.6} noise_std={:.6}", mean_diff, var_diff.sqrt());
            Ok(())
        }
        Command::Denoise {
            config,
            input,
            output,
            report,
        } => {
            let cfg = match &config {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
                    cfgfile::parse(&text).map_err(Failure::args)?
                }
                None => Default::default(),
            };
            let vol = load_volume(&input)?;
            let (out, rep) = denoise_volume(&vol, &cfg).map_err(Failure::from_core)?;
            write_volume(&output, &out).map_err(Failure::from_core)?;
            let text = rep.to_text(&cfg);
            match report {
                Some(path) => std::fs::write(&path, text)
                    .map_err(|e| Failure::io(format!("{}: {e}", path.display())))?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Metrics { reference, test } => {
            let a = load_volume(&reference)?;
            let b = load_volume(&test)?;
            let l = a.intensity_max();
            let psnr = metrics::psnr(&a, &b, l).map_err(Failure::from_core)?;
            let ssim = metrics::ssim(&a, &b, l).map_err(Failure::from_core)?;
            let rmse = metrics::rmse(&a, &b).map_err(Failure::from_core)?;
            if psnr.is_infinite() {
                println!("PSNR inf");
            } else {
                println!("PSNR {psnr:.3}");
            }
            println!("SSIM {ssim:.3}");
            println!("RMSE {rmse:.3}");
            Ok(())
        }
        Command::Bench {
            phantom,
            levels,
            model,
            seed,
            out,
            config,
            size,
        } => {
            if levels.is_empty() {
                return Err(Failure::args("at least one --levels entry required"));
            }
            let cfg = match &config {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
                    Some(cfgfile::parse(&text).map_err(Failure::args)?)
                }
                None => None,
            };
            let model_name = match model {
                NoiseModel::Rician => bench::Model::Rician,
                NoiseModel::Poisson => bench::Model::Poisson,
            };
            bench::run(phantom, model_name, &levels, seed, &out, cfg, size)
        }
    }
}
