//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Elementwise operands disagree on a dimension that cannot broadcast.
    BroadcastMismatch {
        op: &'static str,
        dim: usize,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Shapes must match exactly for this operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Input outside the mathematical domain of the operation (log of a
    /// nonpositive value, sqrt of a negative, division by zero).
    DomainViolation {
        op: &'static str,
        index: usize,
        value: f64,
    },
    /// Matrix product inner extents disagree.
    InnerDimMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    /// Operation requires a rank-2 tensor.
    NotMatrix {
        op: &'static str,
        shape: Vec<usize>,
    },
    InvalidAxis { axis: usize, rank: usize },
    /// Tensor construction with a zero extent or a data length that does not
    /// match the shape product.
    InvalidShape { reason: String },
    NonScalarLoss { shape: Vec<usize> },
    /// The loss tensor has no recorded graph and is not itself a leaf.
    DetachedLoss,
    NonFinite { context: String },
    /// Convolution input channel count disagrees with the kernel.
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    /// Same-padding convolution requires an odd kernel extent.
    EvenKernel { k: usize },
    /// Attention embed dimension not divisible by the head count.
    HeadSplit { dim: usize, heads: usize },
    /// A probability row failed normalization checks.
    RowNotNormalized { row: usize, sum: f64 },
    /// Adversary layer count outside the supported range.
    LayerCount { got: usize },
    /// Deconvolution target does not match the configured patch size.
    TargetMismatch { expected: usize, got: usize },
    /// Every prototype slot for the class is uninitialized.
    UninitializedClass { class: usize },
    /// Training aborted on a non-finite loss component.
    NonFiniteLoss { step: usize, component: &'static str },
    /// Dataset or checkpoint contents failed validation.
    DataFormat(String),
    Config(String),
    EmptySplit,
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::BroadcastMismatch { op, dim, lhs, rhs } => write!(
                f,
                "{op}: dimension {dim} cannot broadcast between {lhs:?} and {rhs:?}"
            ),
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            Error::DomainViolation { op, index, value } => {
                write!(f, "{op}: domain violation at flat index {index} (value {value})")
            }
            Error::InnerDimMismatch { lhs, rhs } => {
                write!(f, "matmul: inner extents disagree for {lhs:?} x {rhs:?}")
            }
            Error::NotMatrix { op, shape } => {
                write!(f, "{op}: expected a rank-2 tensor, got shape {shape:?}")
            }
            Error::InvalidAxis { axis, rank } => {
                write!(f, "axis {axis} out of range for rank {rank}")
            }
            Error::InvalidShape { reason } => write!(f, "invalid shape: {reason}"),
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::DetachedLoss => write!(f, "loss is detached from any differentiation graph"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::ChannelMismatch { op, expected, got } => {
                write!(f, "{op}: expected {expected} input channels, got {got}")
            }
            Error::EvenKernel { k } => {
                write!(f, "same padding requires an odd kernel extent, got {k}")
            }
            Error::HeadSplit { dim, heads } => {
                write!(f, "embed dim {dim} not divisible by {heads} heads")
            }
            Error::RowNotNormalized { row, sum } => {
                write!(f, "probability row {row} sums to {sum}, not 1")
            }
            Error::LayerCount { got } => {
                write!(f, "adversary needs at least 2 layers, got {got}")
            }
            Error::TargetMismatch { expected, got } => {
                write!(f, "deconv target {got} does not match configured patch size {expected}")
            }
            Error::UninitializedClass { class } => {
                write!(f, "no prototype initialized for class {class} in any domain")
            }
            Error::NonFiniteLoss { step, component } => {
                write!(f, "non-finite {component} at step {step}")
            }
            Error::DataFormat(msg) => write!(f, "data format: {msg}"),
            Error::Config(msg) => write!(f, "config: {msg}"),
            Error::EmptySplit => write!(f, "evaluation split is empty"),
            Error::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
