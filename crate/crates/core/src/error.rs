use std::path::PathBuf;

use crate::graph::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tensor file: {0}")]
    TensorFile(String),

    #[error("shape error at node {node}: {msg}")]
    Shape { node: NodeId, msg: String },

    #[error("graph contains a cycle: {0:?}")]
    Cycle(Vec<NodeId>),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("execution failed at node {node}: {msg}")]
    Exec { node: NodeId, msg: String },

    #[error("non-finite value produced by node {node} ({name})")]
    NonFinite { node: NodeId, name: String },

    #[error("non-finite weight in constant node {node} ({name})")]
    NonFiniteWeight { node: NodeId, name: String },

    #[error("unknown pass `{name}`; valid passes: {}", valid.join(", "))]
    UnknownPass { name: String, valid: Vec<&'static str> },

    #[error("label {label} out of range at pixel (row {row}, col {col})")]
    LabelOutOfRange { row: usize, col: usize, label: u32 },

    #[error(transparent)]
    Model(#[from] ModelFileError),

    #[error("power log: {0}")]
    PowerLog(String),

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

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

/// Failure modes of the `.sgm` model container; each is distinguishable.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ModelFileError {
    #[error("bad magic {0:?}, expected \"SGFM\"")]
    BadMagic([u8; 4]),
    #[error("unsupported model file version {0} (expected 1)")]
    VersionMismatch(u16),
    #[error("checksum mismatch in {section} section: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum {
        section: &'static str,
        stored: u32,
        computed: u32,
    },
    #[error("truncated model file: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed model file: {0}")]
    Malformed(String),
}
