use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("action {action} out of range for stage {stage} with {count} actions")]
    ActionOutOfRange {
        stage: usize,
        action: usize,
        count: usize,
    },

    #[error("probability vector is not normalized (sum = {sum})")]
    NotNormalized { sum: f64 },

    #[error("stage {stage} is outside the update set but has no fixed policy")]
    MissingFixedPolicy { stage: usize },

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error(
        "normal equations are rank deficient (smallest singular value {smallest:e}); use a positive ridge"
    )]
    RankDeficient { smallest: f64 },

    #[error(
        "linear system is ill conditioned: condition number {condition:e} exceeds {limit:e} \
         (smallest singular value {smallest:e}); use more samples or a smaller basis"
    )]
    IllConditioned {
        condition: f64,
        limit: f64,
        smallest: f64,
    },

    #[error("fold {fold}: {message}")]
    Fold { fold: usize, message: String },

    #[error("iteration {iteration}, stage {stage}: {source}")]
    Training {
        iteration: usize,
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown name `{0}`")]
    UnknownName(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
