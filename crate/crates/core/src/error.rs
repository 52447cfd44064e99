use thiserror::Error;

/// A single violated configuration constraint.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigViolation {
    PatchLargerThanVolume {
        patch: (usize, usize, usize),
        volume: (usize, usize, usize),
    },
    NonPositiveParameter {
        name: &'static str,
        value: f64,
    },
    SparsityExceedsAtoms {
        sparsity: usize,
        atoms: usize,
    },
}

impl std::fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigViolation::PatchLargerThanVolume { patch, volume } => write!(
                f,
                "patch {:?} does not fit inside volume {:?}",
                patch, volume
            ),
            ConfigViolation::NonPositiveParameter { name, value } => {
                write!(f, "parameter {} must be positive, got {}", name, value)
            }
            ConfigViolation::SparsityExceedsAtoms { sparsity, atoms } => {
                write!(f, "sparsity {} exceeds atom count {}", sparsity, atoms)
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum DenoiseError {
    #[error("invalid configuration: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidConfig(Vec<ConfigViolation>),
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("patch {patch:?} larger than volume {volume:?}")]
    PatchLargerThanVolume {
        patch: (usize, usize, usize),
        volume: (usize, usize, usize),
    },
    #[error("no patch covers location {location:?}")]
    CoverageHole { location: (usize, usize, usize) },
    #[error("atom count {k} has no per-axis factorization covering patch shape {patch:?}")]
    NotFactorizable { k: usize, patch: (usize, usize, usize) },
    #[error("degenerate support (near-singular Gram matrix) on patch {patch_index}")]
    DegenerateSupport { patch_index: usize },
    #[error("SVD failed while updating atom {atom}")]
    SvdFailure { atom: usize },
    #[error("atom index {index} out of range (k = {k})")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("input too small: minimum dimension {min_dim} required, got {got}")]
    TooSmall { min_dim: usize, got: usize },
    #[error("negative intensity {value} at index {index}")]
    NegativeIntensity { value: f64, index: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("truncated body: expected {expected} bytes, got {got}")]
    TruncatedBody { expected: usize, got: usize },
    #[error("unsupported dtype code {code}")]
    UnsupportedDtype { code: u8 },
    #[error("pipeline stage {stage} failed on patch {patch_index:?}: {source}")]
    Stage {
        stage: &'static str,
        patch_index: Option<usize>,
        #[source]
        source: Box<DenoiseError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DenoiseError {
    pub fn at_stage(self, stage: &'static str, patch_index: Option<usize>) -> Self {
        DenoiseError::Stage {
            stage,
            patch_index,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, DenoiseError>;
