use alloc::string::String;

/// Errors raised by the simulation and detection routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("graph is not connected")]
    Disconnected,
    #[error("could not build a connected graph after {attempts} attempts")]
    RetryBudgetExhausted { attempts: usize },
    #[error("edge ({0}, {1}) does not exist")]
    MissingEdge(usize, usize),
    #[error("agent {0} would be left without neighbors")]
    IsolatedAgent(usize),
    #[error("agent id {id} out of range for {n} agents")]
    AgentOutOfRange { id: usize, n: usize },
    #[error("normal matrix carries no information (all regressors are zero)")]
    SingularNormalMatrix,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("class `{0}` has no samples")]
    EmptyClass(&'static str),
    #[error("localization requested for a sample without an attacking neighbor")]
    LocalizationUnderNullHypothesis,
    #[error("infeasible shard policy: {0}")]
    InfeasiblePolicy(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
