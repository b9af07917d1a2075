use thiserror::Error;

use crate::policy::PolicyParams;

pub type Result<T, E = GlimpseError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GlimpseError {
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("state error: {0}")]
    State(String),

    #[error("monotonic frame constraint violated: frame {requested} selected after frame {cursor}")]
    Monotonicity { cursor: usize, requested: usize },

    #[error("record {record}: {reason}")]
    DataIntegrity { record: String, reason: String },

    #[error("exhaustive enumeration infeasible: {count} trajectories exceed the cap of {cap}")]
    Feasibility { count: u128, cap: u128 },

    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        last_good: Box<PolicyParams>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {reason}")]
    Parse { path: String, reason: String },
}

impl GlimpseError {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        GlimpseError::Config {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        GlimpseError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
