use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the calibration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("covariance is not symmetric positive definite: {0}")]
    Covariance(String),

    #[error("matrix is singular or too ill-conditioned to factor: {0}")]
    SingularCovariance(String),

    #[error("ingest error at row {row}, column {col}: {msg}")]
    Ingest { row: usize, col: usize, msg: String },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("linear system is singular: {0}")]
    SingularSystem(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("closed form unavailable for link {0}")]
    UnsupportedClosedForm(String),

    #[error("holdout labels are all identical ({0})")]
    DegenerateHoldout(String),

    #[error("index directions are collinear: {0}")]
    CollinearIndices(String),

    #[error("link output outside [0, 1]: {0}")]
    LinkRange(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable variant name, printed on stderr by the CLI.
    pub fn name(&self) -> &'static str {
        match self {
            Error::Covariance(_) => "CovarianceError",
            Error::SingularCovariance(_) => "SingularCovariance",
            Error::Ingest { .. } => "IngestError",
            Error::Fit(_) => "FitError",
            Error::SingularSystem(_) => "SingularSystem",
            Error::Contract(_) => "ContractError",
            Error::DegenerateModel(_) => "DegenerateModel",
            Error::UnsupportedClosedForm(_) => "UnsupportedClosedForm",
            Error::DegenerateHoldout(_) => "DegenerateHoldout",
            Error::CollinearIndices(_) => "CollinearIndices",
            Error::LinkRange(_) => "LinkRangeError",
            Error::Config(_) => "ConfigError",
            Error::Io(_) => "IoError",
        }
    }

    /// Process exit code: 2 for configuration/input problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Ingest { .. } | Error::Io(_) => 2,
            _ => 3,
        }
    }
}
