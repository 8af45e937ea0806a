use std::path::PathBuf;

/// Errors raised across the editing pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument `{field}`: {message}")]
    InvalidArgument { field: String, message: String },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("timestep {0} is not part of the configured schedule")]
    TimestepOutsideSchedule(u32),

    #[error("no source region: object heatmap is constant")]
    NoSourceRegion,

    #[error("edge ring is empty: {0}")]
    EmptyEdgeRing(String),

    #[error("non-finite gradient at iteration {iteration}: {detail}")]
    NonFiniteGradient { iteration: usize, detail: String },

    #[error("kv cache: {0}")]
    KvCache(String),

    #[error("schedule mismatch: no cached key/value for timestep {timestep}, layer `{layer}`, branch {branch}")]
    ScheduleMismatch {
        timestep: u32,
        layer: String,
        branch: String,
    },

    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },

    #[error("metric unavailable: {0}")]
    MetricUnavailable(String),

    #[error("backbone unavailable: {0}")]
    BackboneUnavailable(String),
}

impl Error {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by caller input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument { .. } | Error::DimensionMismatch(_) | Error::Dataset { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
