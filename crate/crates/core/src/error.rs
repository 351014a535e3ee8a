use thiserror::Error;

/// Errors produced by calibration, numerics and I/O.
#[derive(Debug, Error)]
pub enum McpError {
    #[error("insufficient calibration data: {0}")]
    InsufficientData(String),

    #[error("no feasible point found: max constraint violation {violation:e} after {doublings} penalty doublings")]
    Infeasible { violation: f64, doublings: usize },

    #[error("objective is not finite at the starting point")]
    NonFiniteObjective,

    #[error("root is not bracketed: f(lo) = {f_lo}, f(hi) = {f_hi}")]
    NoBracket { f_lo: f64, f_hi: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("singular shape: {0}")]
    SingularShape(String),

    #[error("unsupported dimension: {0}")]
    UnsupportedDimension(String),

    #[error("covariance is not positive semidefinite")]
    NonPsdCovariance,

    #[error("degenerate removal trace at stage {stage}: {removed} removed, expected {expected}")]
    DegenerateTrace {
        stage: usize,
        removed: usize,
        expected: usize,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("ragged rows: line {line} has {found} fields, expected {expected}")]
    RaggedRows {
        line: u64,
        found: usize,
        expected: usize,
    },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, McpError>;
