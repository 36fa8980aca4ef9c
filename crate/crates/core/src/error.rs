use thiserror::Error;

/// Errors raised by fitting, filtering and data ingestion.
#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient data: need at least {needed} snapshots, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("snapshot data is identically zero")]
    ZeroData,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("covariance is not positive semi-definite (eigenvalue {eigenvalue:e})")]
    NotPositiveSemidefinite { eigenvalue: f64 },

    #[error("covariance is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("innovation covariance is singular; the measurement covariance must regularise it")]
    SingularInnovation,

    #[error("filter divergence: every particle has zero likelihood (min Mahalanobis distance {min_mahalanobis:.3})")]
    FilterDivergence { min_mahalanobis: f64 },

    #[error("spectrum is not conjugate-closed: {0}")]
    ConjugateStructure(String),

    #[error("negative modulus {value:e} in temporal-mode slot {index}")]
    NegativeModulus { index: usize, value: f64 },

    #[error("ensemble member {index}: {source}")]
    Member {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate record for {0}")]
    DuplicateKey(String),

    #[error("no census anchor covers {0}")]
    MissingCensus(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used by front ends to choose exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidInput(_) | Error::Json(_) => ErrorKind::Config,
            Error::InsufficientData { .. }
            | Error::ZeroData
            | Error::Parse { .. }
            | Error::DuplicateKey(_)
            | Error::MissingCensus(_)
            | Error::Io(_) => ErrorKind::Data,
            Error::Member { source, .. } => source.kind(),
            _ => ErrorKind::Numerical,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
