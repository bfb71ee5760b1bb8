use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape mismatch, empty input, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDivergence { epoch: usize },

    #[error("every candidate location has already been queried")]
    CandidatesExhausted,

    #[error("metric not computable: {0}")]
    NotComputable(String),

    #[error("session already stopped ({0})")]
    SessionStopped(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
