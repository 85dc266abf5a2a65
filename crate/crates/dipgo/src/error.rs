//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid noise schedule: {0}")]
    Schedule(String),

    #[error("invalid denoiser spec: {0}")]
    Spec(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("timestep {t} out of range 1..={max}")]
    TimestepRange { t: usize, max: usize },

    #[error("non-finite activation at timestep {step}, block {block}")]
    NonFinite { step: usize, block: usize },

    #[error("illegal gate at node {node}: {reason}")]
    IllegalGate { node: usize, reason: String },

    #[error("training diverged at step {step}: loss is non-finite")]
    Diverged { step: usize },

    #[error(
        "activation memory budget exceeded ({used} > {limit} retained values); \
         enable per-timestep gradient checkpointing to bound the unrolled backward"
    )]
    MemoryBudget { used: usize, limit: usize },

    #[error("no feasible candidate within budget: {0}")]
    NoFeasibleCandidate(String),

    #[error("missing artifact `{artifact}` required by `{needed_by}`; run `{hint}` first")]
    MissingArtifact {
        artifact: String,
        needed_by: String,
        hint: String,
    },

    #[error("run directory is locked by another writer: {0}")]
    RunDirLocked(String),

    #[error("artifact format error: {0}")]
    Format(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
