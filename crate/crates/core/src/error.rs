use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown chromophore `{0}` (known: HbO2, HHb)")]
    UnknownChromophore(String),

    #[error("wavelength grid {lo}-{hi} nm lies outside the tabulated range {min}-{max} nm")]
    GridOutOfTabulatedRange { lo: f64, hi: f64, min: f64, max: f64 },

    #[error("invalid wavelength grid: {0}")]
    InvalidGrid(String),

    #[error("invalid spectra: {0}")]
    InvalidSpectra(String),

    #[error("spectra matrix is rank deficient (smallest/largest singular value = {ratio:e})")]
    RankDeficientSpectra { ratio: f64 },

    #[error("pseudoinverse is stale; call compute_pinv first")]
    StalePseudoinverse,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("negative or non-finite entry in {0}")]
    NegativeValue(&'static str),

    #[error("batch normalization needs at least 2 rows in train mode, got {0}")]
    BatchTooSmall(usize),

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("data matrix is all zeros")]
    ZeroDataMatrix,

    #[error("inclusion {index} is invalid: {reason}")]
    InclusionOutOfBounds { index: usize, reason: String },

    #[error("SO2 needs exactly 2 chromophores (HbO2, HHb), got {0}")]
    WrongChromophoreCount(usize),

    #[error("mask selects no pixel with defined values")]
    EmptyMask,

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by numerics rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. }
        )
    }
}
