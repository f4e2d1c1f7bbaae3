use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing response coefficient for scatterer {scatterer}, sector {sector}")]
    MissingCoefficient { scatterer: usize, sector: usize },

    #[error("{} grid(s) need undefined response coefficients (first: grid {}, scatterer {}, sector {})",
        .0.len(), .0[0].0, .0[0].1, .0[0].2)]
    MissingCoefficients(Vec<(usize, usize, usize)>),

    #[error("degenerate system: {0}")]
    DegenerateSystem(String),

    #[error("rank-deficient least-squares system ({cols} unknowns); use a positive ridge_lambda")]
    RankDeficient { cols: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("progressive iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("format error: {0}")]
    Format(String),
}

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Format(_) => ErrorKind::Input,
            Error::Iteration { source, .. } => source.kind(),
            _ => ErrorKind::Numeric,
        }
    }

    /// Short stable code recorded in sweep result rows.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::MissingCoefficient { .. } | Error::MissingCoefficients(_) => "missing_coefficient",
            Error::DegenerateSystem(_) => "degenerate_system",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::Numeric(_) => "numeric",
            Error::Iteration { source, .. } => source.code(),
            Error::Io(_) => "io",
            Error::Json(_) | Error::Csv(_) | Error::Format(_) => "format",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
