use thiserror::Error;

use crate::conic::SolveStatus;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The conic solve did not produce a usable point (infeasible, unbounded, or failed).
    #[error("steering program not solved: {0}")]
    NotSolved(SolveStatus),

    #[error("controller recovery failed at step {step}: {detail}")]
    RecoveryFailed { step: usize, detail: String },

    /// The solver reported a solution but replaying the recovered law through
    /// the exact moment recursion did not confirm it.
    #[error("relaxation gap: {0}")]
    RelaxationGap(String),

    #[error("tree invariant violated: {0}")]
    Tree(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for the typed "no solution" outcome of a steering solve.
    pub fn is_not_solved(&self) -> bool {
        matches!(self, Error::NotSolved(_))
    }
}
