use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] lwdna_core::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{context}: {source}")]
    Json { context: String, source: serde_json::Error },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("malformed {what} at byte {offset}: {detail}")]
    Format { what: &'static str, offset: u64, detail: String },

    #[error("non-finite training loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("protocol hash mismatch: {left} vs {right}")]
    ProtocolMismatch { left: String, right: String },

    #[error("{0} already exists; pass --force to overwrite")]
    OutputExists(PathBuf),

    #[error("invalid input: {0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }

    /// Process exit code: 2 for infeasible or invalid input, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use lwdna_core::Error as C;
        match self {
            Error::Core(
                C::InfeasibleBudget { .. }
                | C::InvalidArgument { .. }
                | C::UnknownArch(_)
                | C::ConfigLength { .. }
                | C::Arch(_)
                | C::EmptyLayer { .. },
            )
            | Error::Format { .. }
            | Error::ProtocolMismatch { .. }
            | Error::OutputExists(_)
            | Error::Invalid(_) => 2,
            _ => 1,
        }
    }
}
