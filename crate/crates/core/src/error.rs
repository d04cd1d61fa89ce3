use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("`{0}` is not a single vocabulary piece")]
    MultiPiece(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("missing coverage for: {}", .0.join(", "))]
    Coverage(Vec<String>),
    #[error("undefined cosine: zero-norm vector for `{0}`")]
    ZeroNorm(String),
    #[error("rank error: requested k={requested} but only {achievable} directions are available")]
    Rank { requested: usize, achievable: usize },
    #[error("label error: {0}")]
    Label(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("training failure after epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stratification error: {0}")]
    Stratification(String),
    #[error("empty evaluation: {0}")]
    EmptyEvaluation(String),
    #[error("unknown model identifier `{0}`")]
    UnknownModel(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
