use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("duplicate name: {0}")]
    Duplicate(String),

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("backprop requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is detached from the graph; nothing to differentiate")]
    EmptyGraph,

    #[error("training aborted: non-finite {component} loss ({value})")]
    TrainingAbort { component: &'static str, value: f32 },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("checksum mismatch: expected {expected:#010x}, computed {computed:#010x}")]
    Checksum { expected: u32, computed: u32 },

    #[error("file format error: {0}")]
    Format(String),

    #[error("probe error: {0}")]
    Probe(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
