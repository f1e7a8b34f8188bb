use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("degenerate gradient (norm {norm:e}) at z = {z:?}")]
    DegenerateGradient { z: Vec<f64>, norm: f64 },

    #[error("degenerate gradient at traversal step {step} (norm {norm:e})")]
    DegenerateTraversal {
        step: usize,
        norm: f64,
        /// Points visited before the failing step, starting with z0.
        partial: Vec<Vec<f64>>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("undefined ratio: {0}")]
    UndefinedRatio(&'static str),

    #[error("index {index} out of range for {what} of length {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
