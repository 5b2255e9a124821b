use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The multiplier search could not bracket the power budget.
    #[error("calibration failed for segment ({head},{end}): {diagnostics}")]
    Calibration {
        head: usize,
        end: usize,
        diagnostics: String,
    },

    /// The configuration admits no feasible allocation.
    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    /// An enumeration would exceed its size guard.
    #[error("enumeration guard exceeded: {size} > {limit}")]
    Guard { size: u128, limit: u128 },

    /// A segment appeared in simulation without a calibrated policy.
    #[error("no calibrated policy for segment ({head},{end})")]
    MissingPolicy { head: usize, end: usize },

    /// An artifact was produced for a different configuration.
    #[error("stale artifact {path}: expected hash {expected}, found {found}")]
    StaleArtifact {
        path: String,
        expected: String,
        found: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
