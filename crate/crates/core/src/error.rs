use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid shape {0:?}: dimensions must be positive and match the value count")]
    InvalidShape(Vec<usize>),
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("class id {class} out of range for {num_classes} classes")]
    InvalidClass { class: usize, num_classes: usize },
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("non-finite value in parameter `{0}`")]
    NonFiniteParam(String),
    #[error("backward already ran on this tape; record a new forward pass")]
    TapeConsumed,
    #[error("backward needs a single-element output, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("camera pitch leaves no ground plane in view")]
    NoGroundVisible,
    #[error("iteration {iter} exceeds total {total}")]
    IterOutOfRange { iter: usize, total: usize },
    #[error("unknown mode `{0}`")]
    UnknownMode(String),
    #[error("stopped by caller: {0}")]
    Interrupted(String),
}

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}
