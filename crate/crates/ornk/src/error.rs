use thiserror::Error;

/// Crate-wide error type. Parsing errors are deliberately descriptive:
/// the binary formats here are also fuzz targets and must fail cleanly
/// on arbitrary input.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{format} parse error: {detail}")]
    Parse { format: &'static str, detail: String },

    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error("missing artifact: {0}")]
    Missing(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(format: &'static str, detail: impl Into<String>) -> Self {
        Error::Parse { format, detail: detail.into() }
    }
}
