use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("unknown elementwise op `{0}`")]
    UnknownOp(String),
    #[error("{op} expects {expected} operand(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("gradient oracle invalid: function is not deterministic ({0} vs {1})")]
    OracleInvalid(f64, f64),
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("graph is empty after filtering with min count {0}")]
    EmptyGraph(usize),
    #[error("unknown {kind} id {id}")]
    UnknownNode { kind: &'static str, id: String },
    #[error("index {index} out of range for {what} of size {len}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid file format: {0}")]
    Format(String),
    #[error("checkpoint config mismatch:\n{0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
