use thiserror::Error;

/// Errors raised anywhere in the attribution library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("deeplift backward requires reference activations")]
    MissingReference,

    #[error("reference tape does not align with target tape at node {node}: {detail}")]
    TapeMismatch { node: usize, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("code index {code} out of vocabulary (size {vocab})")]
    OutOfVocabulary { code: usize, vocab: usize },

    #[error("record has {got} visits, model supports at most {max}")]
    TooManyVisits { got: usize, max: usize },

    #[error("feature position {position} out of range (record has {len})")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("attribution has {got} scores, record has {expected} positions")]
    MisalignedAttribution { got: usize, expected: usize },

    #[error("{method} is not applicable to {model} models")]
    NotApplicable { method: String, model: String },

    #[error("singular regression system: {0}")]
    Singular(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("malformed record at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing grid cells: {0}")]
    MissingCells(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
