use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("scale {scale} is not invertible modulo {modulus}")]
    NonInvertibleScale { scale: usize, modulus: usize },

    #[error("scale operand carries mass {mass:.3e} on non-invertible values modulo {modulus}")]
    NonInvertibleMass { mass: f64, modulus: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("symbol {symbol} out of range for K = {k}")]
    SymbolOutOfRange { symbol: usize, k: usize },

    #[error("loss diverged at step {step}: {value}")]
    DivergedLoss { step: usize, value: f64 },

    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("enumeration too large: {size} outcomes exceeds limit {limit}")]
    TooLarge { size: u128, limit: u128 },

    #[error("probability table not normalized: sums to {0}")]
    NotNormalized(f64),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed dataset: {0}")]
    MalformedDataset(String),
}

pub type Result<T> = std::result::Result<T, FlowError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> FlowError {
    FlowError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
