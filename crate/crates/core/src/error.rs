use std::path::PathBuf;

/// Errors produced anywhere in the sampling laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("model evaluation failed: {0}")]
    Evaluation(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("integration diverged on interval [{t_lo}, {t_hi}]: {reason}")]
    Divergence {
        t_lo: f64,
        t_hi: f64,
        reason: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("step {step} ([{t_lo}, {t_hi}]) failed: {source}")]
    Step {
        step: usize,
        t_lo: f64,
        t_hi: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn at_step(self, step: usize, t_lo: f64, t_hi: f64) -> Self {
        Error::Step {
            step,
            t_lo,
            t_hi,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
