use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (even after {jitter:e} diagonal jitter)")]
    NotPositiveDefinite { jitter: f64 },

    #[error("matrix is not symmetric: max relative asymmetry {asymmetry:e}")]
    NotSymmetric { asymmetry: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("all log-weights are -inf")]
    AllMinusInfinity,

    #[error("model requires covariates but dataset has none")]
    MissingCovariates,

    #[error("design matrix is rank deficient")]
    RankDeficientDesign,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("trace too short for ESS: {len} < {min}")]
    TooShort { len: usize, min: usize },

    #[error("component {component} collapsed (effective size {size:e})")]
    EmptyComponent { component: usize, size: f64 },

    #[error("all {restarts} EM restarts failed; last error: {last}")]
    AllRestartsFailed { restarts: usize, last: String },

    #[error("chain too short for LOO: {draws} draws < {min}")]
    ChainTooShort { draws: usize, min: usize },

    #[error("unknown simulation design {0:?}")]
    UnknownDesign(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("no items retained after filtering ({excluded} excluded)")]
    NoItemsRetained { excluded: usize },

    #[error("malformed response table: {0}")]
    MalformedTable(String),

    #[error("malformed dataset file: {0}")]
    MalformedDataset(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::UnknownDesign(_) => ErrorClass::Usage,
            Error::NotSymmetric { .. }
            | Error::DimensionMismatch(_)
            | Error::MissingCovariates
            | Error::DegenerateData(_)
            | Error::LengthMismatch { .. }
            | Error::NoItemsRetained { .. }
            | Error::MalformedTable(_)
            | Error::MalformedDataset(_)
            | Error::ChainTooShort { .. }
            | Error::TooShort { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => ErrorClass::Data,
            Error::NotPositiveDefinite { .. }
            | Error::Domain(_)
            | Error::AllMinusInfinity
            | Error::RankDeficientDesign
            | Error::EmptyComponent { .. }
            | Error::AllRestartsFailed { .. } => ErrorClass::Numerical,
        }
    }

    /// Short machine-readable tag.
    pub fn code(&self) -> &'static str {
        match self {
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::NotSymmetric { .. } => "not_symmetric",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::Domain(_) => "domain_error",
            Error::AllMinusInfinity => "all_minus_infinity",
            Error::MissingCovariates => "missing_covariates",
            Error::RankDeficientDesign => "rank_deficient_design",
            Error::Config(_) => "config_error",
            Error::DegenerateData(_) => "degenerate_data",
            Error::TooShort { .. } => "too_short",
            Error::EmptyComponent { .. } => "empty_component",
            Error::AllRestartsFailed { .. } => "all_restarts_failed",
            Error::ChainTooShort { .. } => "chain_too_short",
            Error::UnknownDesign(_) => "unknown_design",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::NoItemsRetained { .. } => "no_items_retained",
            Error::MalformedTable(_) => "malformed_table",
            Error::MalformedDataset(_) => "malformed_dataset",
            Error::Io(_) => "io_error",
            Error::Json(_) => "json_error",
            Error::Csv(_) => "csv_error",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes() {
        assert_eq!(Error::Config("x".into()).class(), ErrorClass::Usage);
        assert_eq!(Error::UnknownDesign("x".into()).class(), ErrorClass::Usage);
        assert_eq!(Error::MalformedDataset("x".into()).class(), ErrorClass::Data);
        assert_eq!(Error::NoItemsRetained { excluded: 2 }.class(), ErrorClass::Data);
        assert_eq!(Error::EmptyComponent { component: 1, size: 0.0 }.class(), ErrorClass::Numerical);
        assert_eq!(Error::AllRestartsFailed { restarts: 5, last: "x".into() }.class(), ErrorClass::Numerical);
        assert_eq!(Error::NotPositiveDefinite { jitter: 1e-6 }.code(), "not_positive_definite");
    }
}
