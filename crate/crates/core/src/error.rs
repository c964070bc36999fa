use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input: bad config, inconsistent lengths, invalid parameters.
    #[error("validation error: {0}")]
    Validation(String),
    /// A numeric operation was asked to evaluate outside its domain.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 2,
            Error::Domain(_) => 3,
            Error::Io(_) => 4,
            Error::Json(e) if e.is_io() => 4,
            Error::Json(_) => 2,
            Error::Csv(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => 4,
            Error::Csv(_) => 2,
        }
    }
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Validation(msg()))
    }
}

pub(crate) fn ensure_len(what: &str, got: usize, want: usize) -> Result<()> {
    ensure(got == want, || {
        format!("{what}: length {got} does not match dimension {want}")
    })
}
