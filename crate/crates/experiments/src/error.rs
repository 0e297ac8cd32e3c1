use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] cyclefqi::Error),
    #[error("trial {trial}: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: cyclefqi::Error,
    },
    #[error("every trial failed ({0} attempted)")]
    AllTrialsFailed(usize),
    #[error("checks failed: {0}")]
    ChecksFailed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("toml parse error: {0}")]
    TomlParse(#[from] toml::de::Error),
    #[error("toml write error: {0}")]
    TomlWrite(#[from] toml::ser::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::TomlParse(_) => 2,
            Error::Core(cyclefqi::Error::UnknownName(_)) => 2,
            _ => 1,
        }
    }
}
