use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the curation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty raster")]
    EmptyRaster,

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("degenerate dimensions {width}x{height}x{bands}")]
    DegenerateDimensions { width: u32, height: u32, bands: u32 },

    #[error("dimension overflow {width}x{height}x{bands}")]
    DimensionOverflow { width: u32, height: u32, bands: u32 },

    #[error("bad magic {0:?}, expected \"MSR1\"")]
    BadMagic([u8; 4]),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("unsupported layout code {0}")]
    UnsupportedLayout(u8),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("non-finite reflectance at row {row}, col {col}, band {band}")]
    NonFiniteReflectance { row: usize, col: usize, band: usize },

    #[error("{path}: line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate record for region {region_id} on {date}")]
    DuplicateRecord { region_id: String, date: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("even structuring element side {0}")]
    EvenElement(usize),

    #[error("no target class")]
    NoTargetClass,

    #[error("signature unobservable")]
    SignatureUnobservable,

    #[error("insufficient background: {found} pixels, need at least {needed}")]
    InsufficientBackground { found: usize, needed: usize },

    #[error("degenerate background")]
    DegenerateBackground,

    #[error("covariance is not positive definite")]
    NotPositiveDefinite,

    #[error("degenerate signature")]
    DegenerateSignature,

    #[error("no candidates")]
    NoCandidates,

    #[error("mangrove fraction {0} outside [0, 1]")]
    FractionOutOfRange(f64),

    #[error("cannot balance: {positives} positives, {negatives} negatives")]
    CannotBalance { positives: usize, negatives: usize },

    #[error("cannot form disjoint splits from {0} countries")]
    TooFewCountries(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
