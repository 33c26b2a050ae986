use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("stability error: {0}")]
    Stability(String),

    #[error("matrix is not positive semidefinite: {0}")]
    NotPsd(String),

    #[error("matrix is not symmetric: {0}")]
    NotSymmetric(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("chain structure error: {0}")]
    Structure(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid user input: bad model file, malformed config, unknown key.
    #[error("invalid {field}: {message}")]
    Config { field: String, message: String },

    #[error("asymptotic covariance is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    DegenerateCovariance { min_eigenvalue: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 1 for validation and configuration
    /// problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Io { .. } | Error::Json(_) | Error::Csv(_) => 1,
            Error::Structure(_) | Error::Dimension(_) | Error::Domain(_) => 1,
            Error::Stability(_)
            | Error::NotPsd(_)
            | Error::NotSymmetric(_)
            | Error::Singular(_)
            | Error::DegenerateCovariance { .. } => 2,
        }
    }
}
