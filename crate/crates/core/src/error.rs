use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {op}: {reason}")]
    Shape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("geometry error in {op}: {detail}")]
    Geometry { op: &'static str, detail: String },

    #[error("non-finite value encountered in {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("intervention unavailable: {0}")]
    InterventionUnavailable(String),

    #[error("undefined conditional P(Y | X = {x}, C = {c}): conditioning event has probability 0")]
    UndefinedConditional { x: usize, c: usize },

    #[error("AUC undefined: labels have {positives} positives and {negatives} negatives")]
    UndefinedAuc { positives: usize, negatives: usize },

    #[error("specification error: {0}")]
    Spec(String),

    #[error("corrupted data: {0}")]
    Corruption(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("trajectory log error: {0}")]
    Log(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
