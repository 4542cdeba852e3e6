use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("MRC parse error: {0}")]
    MrcParse(String),
    #[error("PDB parse error: {0}")]
    PdbParse(String),
    #[error("FASTA parse error: {0}")]
    FastaParse(String),
    #[error("structure error: {0}")]
    Structure(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serialize(String),
}

pub type Result<T> = std::result::Result<T, Error>;
