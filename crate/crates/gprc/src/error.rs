use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] gprc_core::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("invalid input: {0}")]
    Format(String),

    #[error("unknown builtin field `{0}`")]
    UnknownBuiltin(String),

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("ODE state became non-finite at t = {t}")]
    BlowUp { t: f64 },

    #[error("stored model does not reproduce its likelihood: stored {stored}, rebuilt {rebuilt}")]
    ModelMismatch { stored: f64, rebuilt: f64 },

    #[error("{context}: {source}")]
    Context { context: String, source: Box<Error> },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait ResultExt<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T, E: Into<Error>> ResultExt<T> for std::result::Result<T, E> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| Error::Context { context: what(), source: Box::new(e.into()) })
    }
}
