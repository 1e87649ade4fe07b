use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("id out of range: {id} (vocabulary size {size})")]
    IdOutOfRange { id: u32, size: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("fully masked row {row}")]
    FullyMaskedRow { row: usize },

    #[error("backward called before forward: {0}")]
    BackwardBeforeForward(String),

    #[error("knowledge required")]
    KnowledgeRequired,

    #[error("empty target")]
    EmptyTarget,

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("unsupported relation `{0}`")]
    UnsupportedRelation(String),

    #[error("no triplets left after filtering")]
    NoTriplets,

    #[error("need at least {needed} records, got {got}")]
    TooFewRecords { needed: usize, got: usize },

    #[error("corpus too small for IDF")]
    CorpusTooSmall,

    #[error("evaluation input: {0}")]
    Evaluation(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
