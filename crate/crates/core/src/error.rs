use thiserror::Error;

use crate::kinematics::JointVector;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("target unreachable: best residual {residual:.3e} after {iterations} iterations")]
    UnreachableTarget {
        residual: f64,
        iterations: usize,
        best: JointVector,
    },

    #[error("simulation diverged at substep {substep}: body {body} has non-finite state")]
    Diverged { substep: u64, body: String },

    #[error("unsupported shape pair: {0} vs {1}")]
    UnsupportedShapePair(&'static str, &'static str),

    #[error("placement infeasible after {attempts} attempts: {what}")]
    PlacementInfeasible { attempts: usize, what: String },

    #[error("misorientation undefined: optical axis parallel to the line-of-sight reference")]
    UndefinedOrientation,

    #[error("target out of view")]
    TargetOutOfView,

    #[error("no feasible plan: {0}")]
    NoFeasiblePlan(String),

    #[error("only {successes} successful episodes in {attempts} attempts (needed {needed})")]
    InsufficientSuccess {
        successes: usize,
        attempts: usize,
        needed: usize,
    },

    #[error("demo file rejected: {0}")]
    DemoRejected(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;
