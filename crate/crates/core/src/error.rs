use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },

    #[error("unsupported format version {found} in {path}")]
    UnsupportedVersion { path: PathBuf, found: u16 },

    #[error("truncated or malformed file {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("dangling reference: {0}")]
    DanglingReference(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("value out of range for field `{field}`: {detail}")]
    Range { field: String, detail: String },

    #[error("parse error in {path}: {detail}")]
    Parse { path: PathBuf, detail: String },

    #[error("empty sample set")]
    EmptySampleSet,

    #[error("target class {0} is not among the classes being trained")]
    UnknownClassInTargets(u32),

    #[error("class ids overlap between heads: {0:?}")]
    OverlappingClassIds(Vec<u32>),

    #[error("empty pseudo-label set")]
    EmptyPseudoLabelSet,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn dim(what: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected,
            found,
        }
    }

    pub(crate) fn range(field: &str, detail: impl Into<String>) -> Self {
        Error::Range {
            field: field.to_string(),
            detail: detail.into(),
        }
    }
}
