use thiserror::Error;

/// Errors produced anywhere in the training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("direction vector has zero norm")]
    DegenerateDirection,

    #[error("action {action} outside [0, {n})")]
    ActionRange { action: usize, n: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("no achieved goals to choose hindsight goals from")]
    NoGoals,

    #[error("distribution family mismatch: {0}")]
    FamilyMismatch(String),

    #[error("non-positive curvature along the search direction (g^T H^-1 g = {0})")]
    Curvature(f64),

    #[error("conjugate gradient produced a non-finite iterate at iteration {0}")]
    CgDiverged(usize),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("checkpoint incompatible with environment: {0}")]
    CheckpointIncompatible(String),

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
