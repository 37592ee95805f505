use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Shapes, ranges or combinations of settings that cannot be run.
    #[error("configuration error: {0}")]
    Config(String),
    /// A forward or backward pass produced NaN or infinity.
    #[error("non-finite value produced by `{op}`")]
    Numeric { op: &'static str },
    /// Malformed binary input.
    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: usize, reason: String },
    /// A batch source ran dry in the middle of an outer step.
    #[error("batch stream exhausted: needed {needed} batches, got {got}")]
    StreamExhausted { needed: usize, got: usize },
    /// A metric was requested on data that does not define it.
    #[error("evaluation error: {0}")]
    Evaluation(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }
}
