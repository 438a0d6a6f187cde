/// Errors reported by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid domain [{min}, {max}]: bounds must be finite with min < max")]
    InvalidDomain { min: f64, max: f64 },

    #[error("invalid basis count {num_basis}: need at least degree + 1 = {} functions", degree + 1)]
    InvalidBasisCount { num_basis: usize, degree: usize },

    #[error("basis index {index} out of range: degree {degree} admits indices 0..{limit}")]
    InvalidIndex {
        index: usize,
        degree: usize,
        limit: usize,
    },

    #[error("time {time} outside the basis domain [{min}, {max}]")]
    OutOfDomain { time: f64, min: f64, max: f64 },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error("marginal covariance degenerate: {0}")]
    CovarianceDegenerate(String),

    #[error("rank-deficient system: {0}")]
    RankDeficient(String),

    #[error("EM produced a degenerate parameter state: {0}")]
    EmDegenerate(String),

    #[error("EM diverged at iteration {iteration}: {message}")]
    EmDiverged { iteration: usize, message: String },

    #[error("information matrix degenerate: {0}")]
    InformationDegenerate(String),

    #[error("model selection failed: {0}")]
    SelectionFailed(String),

    #[error("simulation study failed: {failed} of {total} replications unusable")]
    StudyFailed { failed: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
