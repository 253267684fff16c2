use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic {found:?}, expected \"FBAG\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated {what}: expected {expected} bytes, found {actual}")]
    Truncated {
        what: &'static str,
        expected: u64,
        actual: u64,
    },

    #[error("non-finite feature value at instance {instance}, column {column}")]
    NonFiniteFeature { instance: usize, column: usize },

    #[error("duplicate instance coordinate (slide {slide}, x {x}, y {y})")]
    DuplicateCoordinate { slide: u16, x: i32, y: i32 },

    #[error("invalid feature bag: {0}")]
    InvalidBag(String),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("no classes survive threshold of {min_cases} cases at level {level}")]
    NoClassesSurvive { level: String, min_cases: usize },

    #[error("class {class:?} has {count} cases, need at least {needed}")]
    ClassTooSmall {
        class: String,
        count: usize,
        needed: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("no tissue found")]
    NoTissue,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite activation in layer {0}")]
    NonFiniteActivation(&'static str),

    #[error("stale forward trace: recorded at model generation {trace}, model is at {model}")]
    StaleTrace { trace: u64, model: u64 },

    #[error("non-finite gradient in tensor {0}; optimizer step refused")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}: validation loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("{0}")]
    Metric(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed or unusable input data, as opposed to
    /// failures while computing on valid data.
    pub fn is_data_error(&self) -> bool {
        !matches!(
            self,
            Error::Diverged { .. }
                | Error::NonFiniteGradient(_)
                | Error::NonFiniteActivation(_)
                | Error::StaleTrace { .. }
        )
    }
}
