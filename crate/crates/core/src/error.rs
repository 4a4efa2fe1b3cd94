use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unknown drug code `{0}`")]
    UnknownDrug(String),
    #[error("empty regimen")]
    EmptyRegimen,
    #[error("duplicate drug code `{0}` in regimen")]
    DuplicateDrug(String),
    #[error("duplicate drug code `{0}` in dictionary")]
    DuplicateDictionaryEntry(String),
    #[error("unknown drug class `{0}`")]
    UnknownClass(String),
    #[error("empty regimen history{}", owner_suffix(.0))]
    EmptyHistory(Option<String>),
    #[error("invalid kernel configuration: {0}")]
    InvalidKernelConfig(String),
    #[error("no regimen is used in more than {threshold} visits")]
    NoRepresentatives { threshold: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("PCA needs at least two rows and a threshold in (0,1]: {0}")]
    InvalidPca(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("invalid similarity context: {0}")]
    InvalidSimilarity(String),
    #[error("non-finite likelihood")]
    NonFiniteLikelihood,
    #[error("precision matrix is not positive definite ({0})")]
    SingularPrecision(&'static str),
    #[error("inverse-Wishart scale matrix is not positive definite")]
    NonPdScale,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("history pool of {pool} cannot supply {requested} individuals without replacement")]
    PoolTooSmall { pool: usize, requested: usize },
    #[error("chain has no stored draws")]
    EmptyChain,
    #[error("no bijective cluster matching exists")]
    LabelMatchFailure,
    #[error("unknown individual `{0}`")]
    UnknownIndividual(String),
    #[error("chain aborted: non-finite state in {0}")]
    NonFiniteState(&'static str),
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
}

fn owner_suffix(owner: &Option<String>) -> String {
    match owner {
        Some(id) => format!(" for `{id}`"),
        None => String::new(),
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
