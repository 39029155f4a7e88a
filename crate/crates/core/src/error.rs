use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate entity_id {0:?}")]
    DuplicateEntity(String),

    #[error("duplicate catalog key ({kb_id:?}, {entity_id:?})")]
    DuplicateCatalogKey { kb_id: String, entity_id: String },

    #[error("mention {mention_id:?} has gold ({kb_id:?}, {entity_id:?}) which is not in the catalog")]
    UnresolvedGold {
        mention_id: String,
        kb_id: String,
        entity_id: String,
    },

    #[error("duplicate mention_id {0:?} across dataset splits")]
    OverlappingSplits(String),

    #[error("unknown catalog ordinal {0}")]
    UnknownOrdinal(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("entity at ordinal {0} has a zero-norm embedding")]
    ZeroNorm(usize),

    #[error("index is empty")]
    EmptyIndex,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Shape(_) | Error::NonFinite(_) | Error::ZeroNorm(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
