use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceLength { len: usize, max: usize },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("training diverged in {stage} at step {step} (loss = {loss})")]
    Divergence {
        stage: String,
        step: usize,
        loss: f64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
