use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("stratification failed: {0}")]
    Stratification(String),

    #[error("label `{0}` does not appear in the training label map")]
    UnknownLabel(String),

    #[error("gram matrix over {n} rows exceeds the configured cap of {cap}")]
    GramTooLarge { n: usize, cap: usize },

    #[error("kernel not PSD: smallest eigenvalue {min_eigenvalue:e} (trace {trace:e})")]
    NotPsd { min_eigenvalue: f64, trace: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("leaf reached: a node with a single class cannot be split")]
    LeafReached,

    #[error("infeasible balance bound beta={beta}: smallest achievable imbalance is {min_imbalance}")]
    InfeasibleBeta { beta: f64, min_imbalance: f64 },

    #[error("exhaustive enumeration refused: {classes} classes exceeds the limit of {limit}")]
    TooManyClasses { classes: usize, limit: usize },

    #[error("split failed at node {path}: {source}")]
    Node {
        path: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
