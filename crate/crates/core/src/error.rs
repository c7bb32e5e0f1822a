use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension mismatch: expected depth {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("index {index} out of range for codebook of size {k}")]
    IndexOutOfRange { index: u32, k: usize },

    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),

    #[error("covariance at location {location} is not positive definite")]
    NotPositiveDefinite { location: usize },

    #[error("sigma {sigma} below floor {floor} at location {location}")]
    SigmaBelowFloor { sigma: f64, floor: f64, location: usize },

    #[error("zero probability for selected symbol at location {location}")]
    ZeroProbability { location: usize },

    #[error("invalid distribution: {0}")]
    InvalidPmf(String),

    #[error("alphabet of {0} symbols exceeds the 2^16 coder precision")]
    AlphabetTooLarge(usize),

    #[error("invalid granularity ratios: {0}")]
    InvalidRatios(String),

    #[error("corrupt stream: {0}")]
    CorruptStream(String),

    #[error("truncated stream after {symbols} of {expected} symbols")]
    Truncated { symbols: usize, expected: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("truncated data: needed {needed} bytes at offset {offset}, only {available} available")]
    TruncatedData {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("inconsistent dimensions: {0}")]
    InconsistentDims(String),

    #[error("model does not match stream: {0}")]
    ModelMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("training diverged at step {step}: loss {loss} exceeded 10x initial {initial} for 100 steps")]
    Diverged { step: usize, loss: f64, initial: f64 },

    #[error("gradient check failed at {} coordinate(s): {:?}", .0.len(), .0)]
    GradCheck(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
