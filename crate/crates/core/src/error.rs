use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: reduction axis is empty")]
    EmptyAxis { op: &'static str },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("node does not belong to this graph")]
    DetachedNode,
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("sequence is empty after truncation")]
    EmptySequence,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("labels must be nonnegative and sum to 1 (sum = {0})")]
    InvalidLabels(f64),
    #[error("need at least {min} candidates, got {got}")]
    TooFewCandidates { min: usize, got: usize },
    #[error("{0}")]
    Selection(String),
    #[error("ground truth index {0} is not part of the ranking")]
    GtAbsent(usize),
    #[error("relevance vector is required")]
    MissingRelevance,
    #[error("{0}")]
    Ranking(String),
    #[error("layer count mismatch for {role}: expected {expected}, got {got}")]
    LayerCount {
        role: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("loss became non-finite at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
