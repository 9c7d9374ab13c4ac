use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite value in {stage}: {detail}")]
    NonFinite { stage: String, detail: String },

    #[error("degenerate patch weights: sum of weights is {sum}, rating is undefined")]
    DegenerateWeights { sum: f64 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("{metric} is undefined: {reason}")]
    UndefinedCorrelation {
        metric: &'static str,
        reason: String,
    },

    #[error("image id {id:?} with tag '{tag}' not found; nearest ids: {nearest:?}")]
    NotFound {
        id: String,
        tag: char,
        nearest: Vec<String>,
    },

    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: Vec<u8> },

    #[error("unsupported version {found} at byte {offset}; supported versions: {supported:?}")]
    UnsupportedVersion {
        found: u16,
        offset: usize,
        supported: Vec<u16>,
    },

    #[error(
        "checksum mismatch at byte {offset}: stored {stored:#010x}, computed {computed:#010x}"
    )]
    Checksum {
        offset: usize,
        stored: u32,
        computed: u32,
    },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("duplicate entry for image id {id:?}, tag '{tag}'")]
    Conflict { id: String, tag: char },

    #[error("image {id:?} is missing feature tag '{missing}'")]
    PartialFeature { id: String, missing: char },

    #[error("dataset too small: {n} records, need at least {min}")]
    TooSmall { n: usize, min: usize },

    #[error("manifest line {line}: {message}")]
    Manifest { line: u64, message: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("incompatible features: {0}")]
    Incompatible(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configs, manifests) rather
    /// than by a failed computation or I/O.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_) | Error::Manifest { .. } | Error::TooSmall { .. }
        )
    }
}
