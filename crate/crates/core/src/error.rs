use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("matrix data has length {len}, expected {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyMatrix { rows: usize, cols: usize },
    #[error("non-finite entry at flat index {index}")]
    NonFinite { index: usize },
    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroRow { row: usize },
    #[error("row {row} is not a probability distribution: {reason}")]
    NotStochastic { row: usize, reason: &'static str },
    #[error("batch size {n} is too small (need at least 2)")]
    BatchTooSmall { n: usize },
    #[error("row {row} has no negative mass left to renormalize (positive saturated)")]
    DegenerateRow { row: usize },
    #[error(
        "degenerate targets: beta = 0 gives one-hot targets, and the reverse KL term \
         KL(prediction || one-hot) is unbounded; use divergence forward_kl or beta > 0"
    )]
    DegenerateTargets,
    #[error("ROI feature sequence is empty")]
    EmptySequence,
    #[error("index {index} out of range for {len} samples")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("gallery of {n} items is too small (need at least {required})")]
    GalleryTooSmall { n: usize, required: usize },
    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::ShapeMismatch {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }
}
