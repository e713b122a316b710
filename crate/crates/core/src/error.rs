use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("tensor shape {shape:?} needs {expected} elements, got {found}")]
    TensorSize {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("dimension mismatch at layer {layer} ({kind}): expected {expected:?}, found {found:?}")]
    Dimension {
        layer: usize,
        kind: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid layer {layer}: {reason}")]
    InvalidLayer { layer: usize, reason: String },

    #[error("network has no weights")]
    EmptyNetwork,

    #[error("weight vector has {found} entries, network expects {expected}")]
    WeightCount { expected: usize, found: usize },

    #[error("stale forward cache: recorded {found} layers, network has {expected}")]
    StaleCache { expected: usize, found: usize },

    #[error("batch size mismatch: outputs have {outputs} rows, labels have {labels}")]
    BatchMismatch { outputs: usize, labels: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("unknown loss kind `{0}`")]
    UnknownLoss(String),

    #[error("weight index {index} out of range (n = {len})")]
    WeightIndex { index: usize, len: usize },

    #[error("finite difference step must be positive and finite, got {0}")]
    BadStep(f64),

    #[error("finite difference produced a non-finite value at weight {index} (step {step})")]
    NonFiniteDifference { index: usize, step: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(&'static str),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid quantization config: {0}")]
    QuantConfig(String),

    #[error("invalid noise model: {0}")]
    NoiseModel(String),

    #[error("device stack for weight {0} has not been programmed")]
    Unprogrammed(usize),

    #[error("NWC denominator is zero")]
    ZeroDenominator,

    #[error("invalid programming plan: {0}")]
    Plan(String),

    #[error("sensitivity rank covers {found} weights, network has {expected}")]
    RankMismatch { expected: usize, found: usize },

    #[error("in-situ training diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: usize, loss: f64 },

    #[error("manifest error at line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
