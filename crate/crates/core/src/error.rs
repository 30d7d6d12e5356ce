use thiserror::Error;

/// Errors produced by the identification pipeline and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value evaluating term `{term}` at row {row}")]
    NonFinite { term: String, row: usize },

    #[error("column `{term}` is identically zero")]
    ZeroColumn { term: String },

    #[error("empty row set")]
    EmptyRows,

    #[error("no consensus subsystem")]
    NoConsensus,

    #[error(
        "mode budget of {max_modes} exhausted with {remaining} rows unexplained \
         (residual norm mean {mean_residual:.3e}, max {max_residual:.3e})"
    )]
    ModeBudgetExhausted {
        max_modes: usize,
        remaining: usize,
        mean_residual: f64,
        max_residual: f64,
    },

    #[error("transition not expressible in Ψ")]
    NotExpressible,

    #[error("relative error ratio undefined: reference series has zero norm")]
    UndefinedRatio,

    #[error("dictionaries differ: {0}")]
    DictionaryMismatch(String),

    #[error("unknown benchmark `{0}`")]
    UnknownBenchmark(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: String, reason: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
