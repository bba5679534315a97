//! Reverse-mode automatic differentiation over dense f64 arrays, the layer
//! primitives for gated recurrent models, Adam/SGD with per-sample step
//! scaling, and checkpoint IO.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("index {index} out of range for {what} of size {size}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("parameter {0:?} already defined")]
    DuplicateParam(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("scale {0} outside [0, 1]")]
    BadScale(f64),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("vocabulary hash mismatch: checkpoint has {found:#018x}, expected {expected:#018x}")]
    VocabHashMismatch { expected: u64, found: u64 },
    #[error("bad checkpoint manifest: {0}")]
    BadManifest(String),
}
