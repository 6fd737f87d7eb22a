use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("backward: {0}")]
    Backward(String),

    #[error("gradient requested for a tensor that is not a tracked leaf of this tape")]
    DetachedLeaf,

    #[error("{instance}: degenerate normalizer (|q·z| = {value:e})")]
    DegenerateNormalizer { instance: String, value: f64 },

    #[error("{instance}: non-finite memory state")]
    NonFiniteState { instance: String },

    #[error("collective `{kind}` at `{site}`: {msg}")]
    Comm {
        kind: &'static str,
        site: String,
        msg: String,
    },

    #[error("training step {step}: non-finite loss (instance {instance}, {location})")]
    Training {
        step: usize,
        instance: String,
        location: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
