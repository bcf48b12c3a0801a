use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward called on a value that does not track gradients")]
    NoGradient,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("class {0} is inactive; its prompt cannot be used")]
    InactiveClass(usize),

    #[error("class {0} was purged and cannot be restored")]
    Purged(usize),

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (learn {learn}, unlearn {unlearn}); \
         check the learning rate and initialization"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        learn: f64,
        unlearn: f64,
    },

    #[error("{what}: bad IDX magic number 0x{found:08x} (expected 0x{expected:08x})")]
    IdxMagic {
        what: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("{}: truncated IDX file (expected {expected} bytes, found {found})", path.display())]
    IdxTruncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("IDX count mismatch: {images} images but {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("empty evaluation subset: {0}")]
    EmptySubset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
