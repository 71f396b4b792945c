//! Error type shared across the crate.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by matrix, masking, transform, format, model, and harness code.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// A matrix constructor received an empty shape.
    InvalidShape { rows: usize, cols: usize },
    /// Data provided to a constructor does not match the declared shape.
    DataLength { expected: usize, got: usize },
    /// A constructor or operation received a NaN or infinite value.
    NonFinite { context: &'static str },
    /// Two operands have incompatible shapes.
    ShapeMismatch {
        context: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// An N:M pattern with n = 0 or n > m.
    InvalidPattern { n: usize, m: usize },
    /// Column count is not divisible by the block length m.
    BlockMismatch { cols: usize, m: usize },
    /// Target sparsity outside [0, 1).
    InvalidSparsity { value: f64 },
    /// A pattern string could not be parsed.
    PatternParse { text: String },
    /// A named criterion or transform is unknown, or used where it cannot apply.
    Selection { reason: String },
    /// Requested low-rank factorization rank outside [1, min(rows, cols)].
    RankOutOfRange { rank: usize, max: usize },
    /// Calibration was requested with no input batches.
    EmptyCalibration,
    /// A mask without N:M structure reached an operation that requires one.
    NotNmStructured,
    /// Compressed metadata holds a pattern index outside the valid range.
    CorruptMetadata {
        row: usize,
        block: usize,
        rank: u128,
        limit: u128,
    },
    /// Per-block metadata width exceeds what the packed encoding supports.
    MetadataWidth { bits: u64 },
    /// A serialized blob failed structural validation.
    Format { reason: String },
    /// Training corpus shorter than the required minimum.
    CorpusTooSmall { len: usize, required: usize },
    /// A step or iteration count that must be at least one was zero.
    ZeroSteps,
    /// A learning rate or other positive hyperparameter was not positive.
    NonPositive { name: &'static str, value: f64 },
    /// A sparsity policy combines options that cannot work together.
    Policy { reason: String },
    /// Experiment configuration is invalid.
    Config { reason: String },
    /// Underlying I/O failure, flattened to a message.
    Io { context: String, message: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidShape { rows, cols } => {
                write!(f, "matrix shape {rows}x{cols} must have rows >= 1 and cols >= 1")
            }
            Error::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape ({expected} expected)")
            }
            Error::NonFinite { context } => {
                write!(f, "non-finite value encountered in {context}")
            }
            Error::ShapeMismatch { context, left, right } => write!(
                f,
                "{context}: shapes {}x{} and {}x{} are incompatible",
                left.0, left.1, right.0, right.1
            ),
            Error::InvalidPattern { n, m } => {
                write!(f, "pattern {n}:{m} requires 1 <= n <= m")
            }
            Error::BlockMismatch { cols, m } => {
                write!(f, "{cols} columns cannot be split into blocks of {m}")
            }
            Error::InvalidSparsity { value } => {
                write!(f, "sparsity {value} outside [0, 1)")
            }
            Error::PatternParse { text } => {
                write!(f, "cannot parse pattern '{text}' (expected N:M or unstructured:S)")
            }
            Error::Selection { reason } => write!(f, "{reason}"),
            Error::RankOutOfRange { rank, max } => {
                write!(f, "rank {rank} outside [1, {max}]")
            }
            Error::EmptyCalibration => write!(f, "calibration requires at least one batch"),
            Error::NotNmStructured => {
                write!(f, "operation requires a mask with N:M structure")
            }
            Error::CorruptMetadata { row, block, rank, limit } => write!(
                f,
                "corrupt metadata at row {row}, block {block}: pattern index {rank} >= {limit}"
            ),
            Error::MetadataWidth { bits } => {
                write!(f, "per-block metadata of {bits} bits exceeds the packing limit")
            }
            Error::Format { reason } => write!(f, "format error: {reason}"),
            Error::CorpusTooSmall { len, required } => {
                write!(f, "corpus of {len} bytes is below the {required}-byte minimum")
            }
            Error::ZeroSteps => write!(f, "step count must be at least 1"),
            Error::NonPositive { name, value } => {
                write!(f, "{name} must be positive, got {value}")
            }
            Error::Policy { reason } => write!(f, "policy error: {reason}"),
            Error::Config { reason } => write!(f, "config error: {reason}"),
            Error::Io { context, message } => write!(f, "{context}: {message}"),
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    pub(crate) fn io(context: impl Into<String>, err: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            message: err.to_string(),
        }
    }
}
