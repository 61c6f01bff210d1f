use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty mesh")]
    EmptyMesh,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("duplicate node {index} (same coordinates as node {first})")]
    DuplicateNode { index: usize, first: usize },
    #[error("non-finite coordinate at node {0}")]
    NonFiniteCoordinate(usize),
    #[error("transform is not expansive")]
    NotExpansive,
    #[error("transform is not agglomerative")]
    NotAgglomerative,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss {
        epoch: usize,
        history: Vec<crate::rom::LossRecord>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parameter {value} out of range [{lo}, {hi}] for component {index}")]
    ParameterOutOfBox {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("fraction {0} not in (0, 1]")]
    InvalidFraction(f64),
    #[error("too few nodes: {0}")]
    TooFewNodes(String),
    #[error("rank {rank} exceeds available dimension {max}")]
    RankTooLarge { rank: usize, max: usize },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
