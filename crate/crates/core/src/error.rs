//! Error type shared by every module of the crate.

use std::fmt;
use std::io;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, VitError>;

/// All failure modes of the laboratory.
///
/// The CLI maps these onto process exit codes: configuration problems
/// exit with 2, numeric failures with 3, I/O problems with 4.
#[derive(Debug)]
pub enum VitError {
    /// Tensor extents do not agree for the requested operation.
    ShapeMismatch { op: &'static str, detail: String },
    /// An operation produced NaN or Inf (checked after each primitive
    /// in debug builds, and on every loss value during training).
    NonFiniteResult { op: &'static str },
    /// Sequence convolution requires an odd kernel length.
    EvenKernel { kernel_size: usize },
    /// A patch with zero elements has no variance.
    EmptyPatch,
    /// `backward` was called on a tensor that is not a scalar.
    NotScalarLoss { numel: usize },
    /// `backward` was called on a value with no gradient path to any
    /// tracked input.
    DetachedGraph,
    /// High-norm detection was asked for an unusable threshold.
    BadThreshold { detail: String },
    /// Image extents are not divisible by the patch size.
    IndivisibleImage { image_h: usize, image_w: usize, patch_size: usize },
    /// A value left its documented domain (e.g. pixels outside [0,1]).
    OutOfRange { what: String },
    /// An IDX file announced an unexpected magic number.
    BadMagic { expected: u32, found: u32 },
    /// IDX image and label files disagree on the record count.
    CountMismatch { images: usize, labels: usize },
    /// An IDX payload ended before the announced record count.
    Truncated { expected_bytes: usize, found_bytes: usize },
    /// A configuration value failed to parse or validate.
    Parse { key: String, reason: String },
    /// A configuration file contains a key this build does not know.
    UnknownKey { key: String },
    /// The training loss became non-finite at the given step.
    NonFiniteLoss { step: u64 },
    /// The wall-time budget was exhausted mid-run.
    BudgetExceeded { elapsed_s: u64, budget_s: u64 },
    /// A checkpoint file is malformed or does not match the model.
    Checkpoint { detail: String },
    Io(io::Error),
}

impl fmt::Display for VitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VitError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            VitError::NonFiniteResult { op } => {
                write!(f, "non-finite result produced by {op}")
            }
            VitError::EvenKernel { kernel_size } => {
                write!(f, "conv1d kernel length must be odd, got {kernel_size}")
            }
            VitError::EmptyPatch => write!(f, "patch has no elements"),
            VitError::NotScalarLoss { numel } => {
                write!(f, "backward requires a scalar loss, got {numel} elements")
            }
            VitError::DetachedGraph => {
                write!(f, "loss has no gradient path to any tracked input")
            }
            VitError::BadThreshold { detail } => write!(f, "bad threshold: {detail}"),
            VitError::IndivisibleImage { image_h, image_w, patch_size } => write!(
                f,
                "image {image_h}x{image_w} is not divisible by patch size {patch_size}"
            ),
            VitError::OutOfRange { what } => write!(f, "value out of range: {what}"),
            VitError::BadMagic { expected, found } => {
                write!(f, "bad IDX magic: expected {expected:#010x}, found {found:#010x}")
            }
            VitError::CountMismatch { images, labels } => {
                write!(f, "IDX count mismatch: {images} images vs {labels} labels")
            }
            VitError::Truncated { expected_bytes, found_bytes } => {
                write!(f, "truncated IDX payload: expected {expected_bytes} bytes, found {found_bytes}")
            }
            VitError::Parse { key, reason } => write!(f, "config error at `{key}`: {reason}"),
            VitError::UnknownKey { key } => write!(f, "unknown config key: {key}"),
            VitError::NonFiniteLoss { step } => {
                write!(f, "training diverged: non-finite loss at step {step}")
            }
            VitError::BudgetExceeded { elapsed_s, budget_s } => {
                write!(f, "wall-time budget exceeded: {elapsed_s}s elapsed of {budget_s}s")
            }
            VitError::Checkpoint { detail } => write!(f, "checkpoint error: {detail}"),
            VitError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for VitError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            VitError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for VitError {
    fn from(e: io::Error) -> Self {
        VitError::Io(e)
    }
}

impl VitError {
    /// Process exit code for the CLI: 2 config, 3 numeric, 4 I/O, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            VitError::Parse { .. } | VitError::UnknownKey { .. } => 2,
            VitError::ShapeMismatch { .. }
            | VitError::NonFiniteResult { .. }
            | VitError::EvenKernel { .. }
            | VitError::EmptyPatch
            | VitError::NotScalarLoss { .. }
            | VitError::DetachedGraph
            | VitError::BadThreshold { .. }
            | VitError::IndivisibleImage { .. }
            | VitError::OutOfRange { .. }
            | VitError::NonFiniteLoss { .. } => 3,
            VitError::Io(_)
            | VitError::BadMagic { .. }
            | VitError::CountMismatch { .. }
            | VitError::Truncated { .. }
            | VitError::Checkpoint { .. } => 4,
            VitError::BudgetExceeded { .. } => 1,
        }
    }
}
