use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {lhs} vs {rhs}")]
    Dimension { lhs: String, rhs: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("finite-difference probe failed at {0}")]
    ProbeFailure(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no events to label")]
    EmptyLabels,

    #[error("split error: {0}")]
    Split(String),

    #[error("alignment skipped: {0}")]
    AlignmentSkipped(String),

    #[error("insufficient data: {have} representations for codebook size {need}")]
    InsufficientData { have: usize, need: usize },

    #[error("out of vocabulary: {0}")]
    OutOfVocabulary(String),

    #[error("feature layout error: {0}")]
    Layout(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("runs are not comparable: {0}")]
    Comparability(String),

    #[error("missing upstream stage: {0}")]
    Dependency(String),

    #[error("dataset ingest failed: {0}")]
    Ingest(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("refusing to write into non-empty directory {0} without --force")]
    OutputExists(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
