use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward called on an empty tape")]
    BackwardBeforeForward,
    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("optimizer step requested before any gradients were accumulated")]
    StepBeforeBackward,
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("unknown viewpoint {0}")]
    UnknownViewpoint(u32),
    #[error("action index {index} out of range for {len} actions")]
    InvalidAction { index: usize, len: usize },
    #[error("edge {0} -> {1} is not in the graph")]
    MissingEdge(u32, u32),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("timestep {t} outside embedding table of {max} rows")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("sequence of {steps} steps exceeds the context of {max} steps")]
    SequenceTooLong { steps: usize, max: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed trajectory: {0}")]
    MalformedTrajectory(String),
    #[error("need at least 2 graphs for an unseen split, got {0}")]
    InsufficientGraphs(usize),
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("episode sampling failed: {0}")]
    EpisodeSampling(String),
}
