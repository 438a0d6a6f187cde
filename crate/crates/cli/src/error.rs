//! Error channel of the binary: every failure is classified, printed to
//! stderr as one JSON record, and mapped to a stable exit code.

use std::fmt;

/// Exit codes: 0 success, 2 command-line usage (owned by the argument
/// parser), 3 unreadable input (files, CSV, configuration), 4 numerical
/// failure, 1 anything else.
#[derive(Debug)]
pub enum AppError {
    Parse(String),
    Numerical(String),
    Io(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Parse(_) => 3,
            AppError::Numerical(_) => 4,
            AppError::Io(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AppError::Parse(_) => "parse",
            AppError::Numerical(_) => "numerical",
            AppError::Io(_) => "io",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            AppError::Parse(m) | AppError::Numerical(m) | AppError::Io(m) => m,
        }
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind(), self.message())
    }
}

impl std::error::Error for AppError {}

impl From<splinemix::Error> for AppError {
    fn from(e: splinemix::Error) -> Self {
        use splinemix::Error::*;
        match &e {
            InvalidDomain { .. }
            | InvalidBasisCount { .. }
            | InvalidIndex { .. }
            | OutOfDomain { .. }
            | InvalidDataset(_)
            | InvalidParameters(_) => AppError::Parse(e.to_string()),
            CovarianceDegenerate(_)
            | RankDeficient(_)
            | EmDegenerate(_)
            | EmDiverged { .. }
            | InformationDegenerate(_)
            | SelectionFailed(_)
            | StudyFailed { .. } => AppError::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Io(e.to_string())
    }
}

impl From<csv::Error> for AppError {
    fn from(e: csv::Error) -> Self {
        AppError::Parse(e.to_string())
    }
}

impl From<toml::de::Error> for AppError {
    fn from(e: toml::de::Error) -> Self {
        AppError::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::Io(format!("cannot encode report: {e}"))
    }
}

pub type AppResult<T> = Result<T, AppError>;
