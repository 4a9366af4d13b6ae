use thiserror::Error;

/// Error type shared by all subsystems.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor extents do not line up (matmul inner dims, broadcast, non-scalar loss).
    #[error("shape error: {0}")]
    Shape(String),

    /// A softmax row (or encoder input) has no unmasked entry.
    #[error("mask error: {0}")]
    Mask(String),

    /// Token id outside the vocabulary.
    #[error("vocab error: {0}")]
    Vocab(String),

    /// Corpus / feature-table level problems (empty corpus, unresolvable image id).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed file contents (feature records, checkpoints, config blocks).
    #[error("format error: {0}")]
    Format(String),

    /// A representation vector has (near-)zero absolute mass and cannot be normalized.
    #[error("degenerate mass: {0}")]
    DegenerateMass(String),

    /// NaN/Inf appeared where only finite values are allowed.
    #[error("numerics error: {0}")]
    Numerics(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
