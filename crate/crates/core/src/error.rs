//! Error type shared across the pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("divergent support: q is zero at index {index} where p is positive")]
    DivergentSupport { index: usize },

    #[error("invalid probability vector: {0}")]
    InvalidProbVector(String),

    #[error("no classes")]
    NoClasses,

    #[error("degenerate confidence: quality {0} >= 1")]
    DegenerateConfidence(f64),

    #[error("invalid response bundle: {0}")]
    InvalidBundle(String),

    #[error("no candidate values")]
    NoCandidateValues,

    #[error("level {level} out of range (grid has {levels} levels)")]
    LevelOutOfRange { level: usize, levels: usize },

    #[error("node index {index} out of range ({nodes} nodes)")]
    NodeOutOfRange { index: usize, nodes: usize },

    #[error("misaligned detectors: {0}")]
    MisalignedDetectors(String),

    #[error("non-max set empty: need at least 2 classes")]
    NonMaxSetEmpty,

    #[error("scene overconstrained: {0}")]
    SceneOverconstrained(String),

    #[error("training diverged at step {step}, epoch {epoch}")]
    Divergence { step: usize, epoch: usize },

    #[error("no eval scenes")]
    NoEvalScenes,

    #[error("invalid protocol config: {0}")]
    InvalidProtocol(String),

    #[error("invalid world config: {0}")]
    InvalidWorld(String),

    #[error("dangling {kind} reference: id {id}")]
    DanglingReference { kind: &'static str, id: i64 },

    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: i64 },

    #[error("scenario spec error: {0}")]
    SpecError(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
