use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Input data or configuration violates a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// A file's column layout does not match the requested schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// A CSV cell failed to parse as a number.
    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: String, msg: String },

    /// Iterative training produced a non-finite loss.
    #[error("training diverged: {0}; try a lower learning rate")]
    Diverged(String),

    /// An iterative solver ran out of iterations or its iterates blew up.
    #[error("did not converge: {0}")]
    NonConvergence(String),

    /// Logistic MLE does not exist because the classes are separable.
    #[error("perfect separation detected (separating direction strongest on {0})")]
    Separation(String),

    /// A regression design matrix is rank deficient.
    #[error("rank-deficient design: collinear columns {0:?}")]
    RankDeficient(Vec<String>),

    /// Every candidate column of a matching space was pruned away.
    #[error("degenerate embedding: all columns pruned ({0})")]
    DegenerateEmbedding(String),

    /// A variable-selection method selected no features.
    #[error("empty support: {0}")]
    EmptySupport(String),

    /// Every sampled pair had a zero score difference.
    #[error("metric check undefined: all score differences are zero")]
    UndefinedRatio,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Schema(_) | Error::Parse { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
