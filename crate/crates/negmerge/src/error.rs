use std::io;
use std::path::{Path, PathBuf};

use negmerge_harness::HarnessError;
use thiserror::Error;

/// Problems with the bytes of a container file.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("file is {0} bytes, too short for a header length")]
    Truncated(usize),
    #[error("header length {header} exceeds the {available} bytes that follow it")]
    HeaderTooLarge { header: u64, available: u64 },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensor `{name}` has unknown dtype `{dtype}`")]
    UnknownDtype { name: String, dtype: String },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor `{name}` offsets [{begin}, {end}] fall outside the {len}-byte data section")]
    OffsetOutOfBounds {
        name: String,
        begin: u64,
        end: u64,
        len: u64,
    },
    #[error("tensor `{0}` overlaps the data of another tensor")]
    OverlappingOffsets(String),
    #[error("data section has unused bytes at offset {at}")]
    Gap { at: u64 },
    #[error("tensor `{name}` needs {expected} bytes but its offsets span {actual}")]
    SizeMismatch {
        name: String,
        expected: u64,
        actual: u64,
    },
    #[error("tensor `{name}` has a non-finite value at index {index}")]
    NonFinite { name: String, index: usize },
    #[error("malformed sparse vector: {0}")]
    Sparse(String),
    #[error("malformed consensus state: {0}")]
    State(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    Core(#[from] negmerge_core::Error),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, source: FormatError) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status: 1 I/O or unreadable input, 2 schema mismatch,
    /// 3 invalid configuration, 4 experiment stage failure.
    pub fn exit_code(&self) -> i32 {
        use negmerge_core::Error as C;
        match self {
            Error::Io { .. } | Error::Format { .. } => 1,
            Error::Core(e) => match e {
                C::SchemaMismatch { .. } => 2,
                C::NonFiniteValue { .. }
                | C::MalformedSparse { .. }
                | C::MalformedState { .. }
                | C::IndexOutOfRange { .. } => 1,
                _ => 3,
            },
            Error::Harness(HarnessError::Stage { .. }) => 4,
            Error::Harness(HarnessError::Core(C::SchemaMismatch { .. })) => 2,
            Error::Harness(_) => 3,
            Error::Config(_) => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
