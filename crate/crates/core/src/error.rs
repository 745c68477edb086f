use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("tape does not belong to this ensemble/input: {0}")]
    TapeMismatch(&'static str),

    #[error("no ensemble present for trainable step {t}")]
    MissingEnsemble { t: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("step {t} is not trainable")]
    NotTrainable { t: usize },

    #[error("empty path set")]
    EmptyPaths,

    #[error(
        "non-finite gradient at stage {stage}, epoch {epoch}, particle {particle} (norm {norm})"
    )]
    NonFiniteGradient {
        stage: usize,
        epoch: usize,
        particle: usize,
        norm: f64,
    },

    #[error("batch risk {risk} exceeded the abort threshold at stage {stage}, epoch {epoch}")]
    LossAbort { stage: usize, epoch: usize, risk: f64 },

    #[error("slope undefined: {0}")]
    UndefinedSlope(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
