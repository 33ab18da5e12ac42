use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Every failure the algorithmic core can report.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    ZeroNormVector,
    InvalidHyperparameter { name: &'static str, value: f64 },
    NonFiniteGradient { index: usize },
    DimensionMismatch { expected: usize, found: usize },
    ShapeMismatch(&'static str),
    Validation(String),
    InvalidSpec(String),
    InvalidK { k: usize, max: usize },
    DegenerateSet { count: usize },
    TraceMismatch,
    EmptySet,
    BatchTooSmall { size: usize },
    MissingMixedEmbeddings,
    InvalidConfig(String),
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    EmptySplit(&'static str),
    InsufficientData { images: usize, folds: usize },
}

impl Error {
    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ZeroNormVector => "ZERO_NORM_VECTOR",
            Error::InvalidHyperparameter { .. } => "INVALID_HYPERPARAMETER",
            Error::NonFiniteGradient { .. } => "NON_FINITE_GRADIENT",
            Error::DimensionMismatch { .. } => "DIMENSION_MISMATCH",
            Error::ShapeMismatch(_) => "SHAPE_MISMATCH",
            Error::Validation(_) => "VALIDATION",
            Error::InvalidSpec(_) => "INVALID_SPEC",
            Error::InvalidK { .. } => "INVALID_K",
            Error::DegenerateSet { .. } => "DEGENERATE_SET",
            Error::TraceMismatch => "TRACE_MISMATCH",
            Error::EmptySet => "EMPTY_SET",
            Error::BatchTooSmall { .. } => "BATCH_TOO_SMALL",
            Error::MissingMixedEmbeddings => "MISSING_MIXED_EMBEDDINGS",
            Error::InvalidConfig(_) => "INVALID_CONFIG",
            Error::NonFiniteLoss { .. } => "NON_FINITE_LOSS",
            Error::EmptySplit(_) => "EMPTY_SPLIT",
            Error::InsufficientData { .. } => "INSUFFICIENT_DATA",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ZeroNormVector => write!(f, "vector norm is below 1e-12"),
            Error::InvalidHyperparameter { name, value } => {
                write!(f, "invalid hyperparameter {name} = {value}")
            }
            Error::NonFiniteGradient { index } => {
                write!(f, "non-finite gradient at coordinate {index}")
            }
            Error::DimensionMismatch { expected, found } => {
                write!(f, "dimension mismatch: expected {expected}, found {found}")
            }
            Error::ShapeMismatch(what) => write!(f, "shape mismatch: {what}"),
            Error::Validation(msg) => write!(f, "validation failed: {msg}"),
            Error::InvalidSpec(msg) => write!(f, "invalid synthetic spec: {msg}"),
            Error::InvalidK { k, max } => write!(f, "k = {k} outside [1, {max}]"),
            Error::DegenerateSet { count } => {
                write!(f, "feature set of {count} vectors cannot be split")
            }
            Error::TraceMismatch => write!(f, "gradient shape does not match merge trace"),
            Error::EmptySet => write!(f, "empty feature set"),
            Error::BatchTooSmall { size } => {
                write!(f, "batch of {size} has no in-batch negatives")
            }
            Error::MissingMixedEmbeddings => {
                write!(f, "harder terms enabled but batch carries no mixup coefficients")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::NonFiniteLoss { epoch, batch, loss } => {
                write!(f, "non-finite loss {loss} at epoch {epoch}, batch {batch}")
            }
            Error::EmptySplit(name) => write!(f, "split '{name}' is empty"),
            Error::InsufficientData { images, folds } => {
                write!(f, "{images} images cannot fill {folds} folds")
            }
        }
    }
}

impl core::error::Error for Error {}
