use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("unsupported depthwise kernel extent {0}x{0} (expected 3 or 5)")]
    UnsupportedKernel(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("sigmoid temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("group norm of an empty weight subset")]
    EmptySubset,

    #[error("channel split needs an even channel count, got {0}")]
    OddChannelCount(usize),

    #[error("layer count mismatch: expected {expected}, found {found}")]
    LayerCountMismatch { expected: usize, found: usize },

    #[error(
        "predicted runtime {0} ms is not positive; set a positive fixed_overhead_ms \
         in the latency table when every layer may be skipped"
    )]
    NonPositiveRuntime(f64),

    #[error("non-finite loss value {0}")]
    NonFiniteLoss(f64),

    #[error("invalid latency table: {0}")]
    InvalidLatencyTable(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("enumeration of {0} architectures exceeds the budget of 100000")]
    EnumerationBudget(u128),

    #[error("malformed artifact: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
