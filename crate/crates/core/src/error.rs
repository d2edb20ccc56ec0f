use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("rle counts sum to {got}, expected {expected} for a {h}x{w} mask")]
    RleLength {
        got: usize,
        expected: usize,
        h: usize,
        w: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cost matrix has {rows} rows but only {cols} columns")]
    TooManyRows { rows: usize, cols: usize },

    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },

    #[error("brute-force assignment limited to {max_rows}x{max_cols}, got {rows}x{cols}")]
    OracleTooLarge {
        rows: usize,
        cols: usize,
        max_rows: usize,
        max_cols: usize,
    },

    #[error("assignment references gt {gt} / prediction {pred} out of range")]
    InvalidAssignment { gt: usize, pred: usize },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("clip {0} has no predictions")]
    MissingPredictions(usize),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
