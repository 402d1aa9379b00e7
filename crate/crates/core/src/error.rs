use alloc::string::String;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("simulation diverged for particle {particle} at step {step}")]
    SimulationDiverged { particle: usize, step: usize },

    #[error("integration diverged at step {step} (state norm {norm})")]
    StepDiverged { step: usize, norm: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty sequence")]
    EmptySequence,

    #[error("backward requested before a forward pass was recorded")]
    NoForward,

    #[error("non-finite value in {component}: {detail}")]
    NonFinite { component: String, detail: String },

    #[error("path too short: need at least {need} states, got {got}")]
    PathTooShort { need: usize, got: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("degenerate bounds: {0}")]
    DegenerateBounds(String),
}
