use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("malformed json in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("malformed config: {0}")]
    Config(String),

    #[error("missing file for id `{id}`: {path}")]
    MissingFile { id: String, path: PathBuf },

    #[error("size mismatch for `{id}`: {detail}")]
    SizeMismatch { id: String, detail: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("teacher output missing for id `{0}`")]
    MissingTeacher(String),

    #[error("no fusion reference for `{0}`; ghosting comparison needs a synthetic dataset with fusion_ref/ (see `broker synth`)")]
    MissingReference(String),
    #[error("inconsistent ablation: {0}")]
    Ablation(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// Stable machine-readable code, used as the prefix of CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::Image { .. } => "E_IMAGE",
            Error::Json { .. } => "E_JSON",
            Error::Config(_) => "E_CONFIG",
            Error::MissingFile { .. } => "E_MISSING_FILE",
            Error::SizeMismatch { .. } => "E_SIZE_MISMATCH",
            Error::Invalid(_) => "E_INVALID",
            Error::Shape(_) => "E_SHAPE",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::MissingTeacher(_) => "E_MISSING_TEACHER",
            Error::MissingReference(_) => "E_MISSING_REF",
            Error::Ablation(_) => "E_ABLATION",
            Error::Tensor(_) => "E_TENSOR",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
