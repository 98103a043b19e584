use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{what} did not converge (residual {residual:e})")]
    NonConvergence { what: &'static str, residual: f64 },

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("alignment needs at least {required} usable dictionary pairs, found {usable}")]
    TooFewPairs { usable: usize, required: usize },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("cannot corrupt snippet with {0} real sentence(s)")]
    Corruption(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite {objective} loss {value} at step {step}")]
    NonFiniteLoss {
        step: usize,
        objective: &'static str,
        value: f64,
    },

    #[error("empty document: {0}")]
    EmptyDocument(String),

    #[error("no result for document {0:?}")]
    MissingResult(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
