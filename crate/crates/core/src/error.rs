use std::path::PathBuf;

/// Errors raised anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum RpoError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("timestep {t} out of range 1..={horizon}")]
    TimestepOutOfRange { t: usize, horizon: usize },

    #[error("pretraining did not converge: held-out loss {final_loss:.6} vs initial {initial_loss:.6}")]
    NotConverged { final_loss: f64, initial_loss: f64 },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl RpoError {
    /// Process exit status for the CLI: 2 for bad input, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RpoError::InvalidArgument(_)
            | RpoError::UnknownToken(_)
            | RpoError::Config { .. }
            | RpoError::MissingFile(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, RpoError>;

pub(crate) fn invalid(msg: impl Into<String>) -> RpoError {
    RpoError::InvalidArgument(msg.into())
}

/// A configuration error pinned to one field.
pub(crate) fn field(path: impl Into<String>, message: impl Into<String>) -> RpoError {
    RpoError::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl RpoError {
    /// Prefixes the field path of a configuration error with its section.
    pub fn in_section(self, section: &str) -> Self {
        match self {
            RpoError::Config { path, message } => RpoError::Config {
                path: format!("{section}.{path}"),
                message,
            },
            other => other,
        }
    }
}
