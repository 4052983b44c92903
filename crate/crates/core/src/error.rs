use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Problems decoding one of the binary artifact formats.
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("magic/version mismatch: found {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("file truncated at byte {0}")]
    Truncated(usize),

    #[error("shape table mismatch: {0}")]
    ShapeTable(String),

    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("maxpool2x2 requires even spatial dimensions, got {height}x{width}")]
    OddSpatialDim { height: usize, width: usize },

    #[error("backward pass for {0} requires its forward context")]
    MissingContext(&'static str),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("distribution is not normalized (sum = {sum})")]
    NotNormalized { sum: f64 },

    #[error("weight file: {0}")]
    WeightFormat(FormatError),

    #[error("eval table file: {0}")]
    TableFormat(FormatError),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("gaussian process: {0}")]
    Gp(String),

    #[error("cost model: {0}")]
    Cost(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
