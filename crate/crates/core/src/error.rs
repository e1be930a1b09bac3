use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("{matrix} is not positive definite{context}")]
    Decomposition { matrix: String, context: String },
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("worker failure: {0}")]
    Worker(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn not_spd(matrix: impl Into<String>) -> Self {
        Error::Decomposition { matrix: matrix.into(), context: String::new() }
    }

    /// Attaches a subject label to decomposition and domain failures.
    pub fn for_subject(self, id: &str) -> Self {
        match self {
            Error::Decomposition { matrix, context } => Error::Decomposition {
                matrix,
                context: format!("{context} (subject {id})"),
            },
            Error::Domain(msg) => Error::Domain(format!("{msg} (subject {id})")),
            other => other,
        }
    }

    /// True for errors caused by invalid numbers or data rather than I/O or internals.
    pub fn is_domain(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Worker(_))
    }
}
