use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: lo={lo} hi={hi}")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("invalid quantization bounds: qmin={qmin} qmax={qmax}")]
    InvalidBounds { qmin: i32, qmax: i32 },
    #[error("non-finite input value")]
    NonFiniteInput,
    #[error("clip bounds reversed: lo > hi")]
    ClipBounds,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("observer has seen no data")]
    EmptyObserver,
    #[error("graph invalid: {0}")]
    GraphInvalid(String),
    #[error("conversion error: {0}")]
    Conversion(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("malformed image file: {0}")]
    MalformedImage(String),
    #[error("bad magic bytes in model file")]
    BadMagic,
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated model file")]
    Truncated,
    #[error("label {0} out of range for {1} classes")]
    LabelOutOfRange(usize, usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
