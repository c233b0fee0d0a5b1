use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape([usize; 4]),
    #[error("element count of shape {0:?} overflows usize")]
    ShapeOverflow([usize; 4]),
    #[error("data length {got} does not match shape element count {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: [usize; 4], right: [usize; 4] },
    #[error("convolution geometry: {0}")]
    Geometry(String),
    #[error("unsupported orientation count {0}: expected one of 1, 2, 4, 8")]
    UnsupportedOrientations(usize),
    #[error("unsupported filter side {0}: expected 1 or 3")]
    UnsupportedFilterSide(usize),
    #[error("orientation index {index} out of range for K = {k}")]
    OrientationOutOfRange { index: usize, k: usize },
    #[error("expected {expected} gradient planes, got {got}")]
    PlaneCount { expected: usize, got: usize },
    #[error("filter has {got} weights, expected {expected}")]
    FilterSize { expected: usize, got: usize },
    #[error("element {index} is {value}, expected exactly +1 or -1")]
    NotBinary { index: usize, value: f64 },
    #[error("backward called without a preceding forward pass")]
    MissingCache,
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("batch normalization evaluated before any training batch")]
    EvalBeforeTraining,
    #[error("{0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error("IDX parse error at byte offset {offset}: {reason}")]
    Idx { offset: usize, reason: String },
    #[error("topology mismatch: {0}")]
    Topology(String),
}
