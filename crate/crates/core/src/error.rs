use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: need {needed} bytes, found {found}")]
    TruncatedPayload { needed: usize, found: usize },
    #[error("non-finite value at index {index}")]
    NonFiniteValue { index: usize },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("ground truth [{start}, {end}] out of range for {n_clips} clips ({id})")]
    GtOutOfRange {
        id: String,
        start: usize,
        end: usize,
        n_clips: usize,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid number of clips: {0}")]
    InvalidN(usize),
    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("no offsets satisfy the length constraint after {attempts} attempts")]
    InfeasibleLengths { attempts: usize },
    #[error("incompatible frame rates {0} and {1}")]
    IncompatibleFrameRate(f64, f64),
    #[error("score maps have mismatched masks")]
    MaskMismatch,
    #[error("no subject found in {0:?}")]
    NoSubjectFound(String),
    #[error("no detections in segment [{start}, {end}] of {video_id}")]
    NoDetectionsInSegment {
        video_id: String,
        start: usize,
        end: usize,
    },
    #[error("clip-to-frame mapping missing or invalid: {0}")]
    MappingMissing(String),
    #[error("degenerate box {0:?}")]
    DegenerateBox([f64; 4]),
    #[error("invalid interval [{0}, {1}]")]
    InvalidInterval(usize, usize),
    #[error("invalid tube: {0}")]
    InvalidTube(String),
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("missing entry: {0}")]
    Missing(String),
    #[error("json error at line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that come from numerical breakdown rather than bad
    /// inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. }
        )
    }
}
