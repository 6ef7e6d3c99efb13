use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Why two schemas disagree on a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MismatchReason {
    Missing,
    Dtype,
    Shape,
}

impl fmt::Display for MismatchReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MismatchReason::Missing => "missing",
            MismatchReason::Dtype => "dtype",
            MismatchReason::Shape => "shape",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("tensor name must be non-empty")]
    EmptyName,
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor has {actual} elements but its shape requires {expected}")]
    ElementCount { expected: usize, actual: usize },
    #[error("non-finite value in tensor `{name}` at element {index}")]
    NonFiniteValue { name: String, index: usize },
    #[error("schema mismatch on tensor `{name}`: {reason}")]
    SchemaMismatch { name: String, reason: MismatchReason },
    #[error("merge pool is empty")]
    EmptyPool,
    #[error("merge pool needs at least {min} vectors, got {actual}")]
    PoolTooSmall { min: usize, actual: usize },
    #[error("invalid merge spec: {0}")]
    InvalidSpec(String),
    #[error("invalid negation config: {0}")]
    InvalidConfig(String),
    #[error("sparse index {index} out of range for tensor `{name}` of length {len}")]
    IndexOutOfRange { name: String, index: usize, len: usize },
    #[error("malformed sparse tensor `{name}`: {reason}")]
    MalformedSparse { name: String, reason: String },
    #[error("malformed consensus state for `{name}`: {reason}")]
    MalformedState { name: String, reason: String },
    #[error("no task vectors absorbed")]
    NoVectorsAbsorbed,
    #[error("invalid lambda grid: {0}")]
    InvalidGrid(String),
    #[error("no lambda on the grid satisfies the retain floor")]
    NoFeasibleLambda,
    #[error("tensor `{tensor}` matches both group `{first}` and group `{second}`")]
    OverlappingGroups {
        tensor: String,
        first: String,
        second: String,
    },
    #[error("no layer indices could be extracted from tensor names")]
    NoLayerIndices,
}
