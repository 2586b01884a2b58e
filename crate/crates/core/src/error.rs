use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate batch: batch norm in train mode needs at least 2 rows, got {0}")]
    DegenerateBatch(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("gradient/parameter mismatch: {0}")]
    Misaligned(String),
    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    NoConvergence { sweeps: usize, off_norm: f64 },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("duplicate block or id: {0}")]
    Duplicate(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("infeasible partition: {0}")]
    Infeasible(String),
    #[error("degenerate weight: {0}")]
    DegenerateWeight(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("eigenvalue ordering check failed: {0}")]
    GramCheck(String),
    #[error("IDX format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
