use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("graph error: {0}")]
    Graph(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("missing input binding: {0}")]
    MissingBinding(String),
    #[error("division by zero in node {0}")]
    DivByZero(String),
    #[error("empty reduction")]
    EmptyReduction,
    #[error("contraction dim not shared: {0}")]
    ContractionDim(String),
    #[error("grid error: {0}")]
    Grid(String),
    #[error("scratchpad capacity exceeded in kernel {kernel}: needs {needed} bytes, cap {cap}")]
    ScratchpadExceeded { kernel: String, needed: usize, cap: usize },
    #[error("write-set overlap detected in kernel {0}")]
    WriteOverlap(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown variant: {0}")]
    UnknownVariant(String),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;
