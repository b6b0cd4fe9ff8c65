use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or extents that do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid hyper-parameters, unknown tags, bad layer indices.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition (non-scalar backward root, wrong kernel size).
    #[error("contract error: {0}")]
    Contract(String),

    /// Non-finite values met during evaluation.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Unusable input data (empty dataset, malformed files).
    #[error("input error: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub(crate) fn shape_mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}
