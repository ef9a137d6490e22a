use thiserror::Error;

/// Errors surfaced by the library's fallible entry points.
///
/// Contract violations in the math kernels (shape mismatches, invalid noise
/// ranges) panic instead; these variants cover user input, IO, and runtime
/// conditions a caller is expected to handle.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("checkpoint `{path}`: {message}")]
    Checkpoint { path: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn checkpoint(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            message: message.into(),
        }
    }
}
