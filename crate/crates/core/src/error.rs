use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("manifest row {row}: {kind}")]
    Ingest { row: usize, kind: IngestError },

    #[error("weight archive: {0}")]
    Load(#[from] LoadError),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    #[error("unknown sample id `{0}`")]
    Lookup(String),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures caused by the filesystem rather than by data content.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Image { source, .. } => matches!(source, image::ImageError::IoError(_)),
            Error::Ingest { kind: IngestError::MissingFile(_), .. } => true,
            _ => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("image file not found: {0}")]
    MissingFile(PathBuf),
    #[error("unknown label `{0}` (expected `glaucoma` or `normal`)")]
    UnknownLabel(String),
    #[error("duplicate sample_id `{0}`")]
    DuplicateId(String),
    #[error("empty {0} field")]
    EmptyField(&'static str),
    #[error("malformed row: {0}")]
    Malformed(String),
    #[error("cannot decode image: {0}")]
    Decode(String),
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("bad magic (expected `CWT1`)")]
    BadMagic,
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("duplicate tensor name `{0}`")]
    NameCollision(String),
    #[error("tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("tensor `{0}` has a zero extent")]
    ZeroExtent(String),
    #[error("tensor `{0}` contains non-finite values")]
    NonFinite(String),
}
