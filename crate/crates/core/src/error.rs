use thiserror::Error;

use crate::pcl::NewtonReport;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular matrix: zero pivot at row {row}")]
    SingularMatrix { row: usize },

    #[error("operator `{0}` has no reverse rule")]
    UnsupportedOperator(String),

    #[error("node {node} ({tag}) failed: {source}")]
    NodeFailed {
        node: usize,
        tag: String,
        #[source]
        source: Box<Error>,
    },

    #[error("newton solver diverged after {} iterations (residual {:e})", .report.iterations, .report.final_residual)]
    SolverDiverged { report: NewtonReport },

    #[error("time step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("nonphysical state: {0}")]
    NonPhysical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures of the numerical solvers (as opposed to usage errors).
    pub fn is_solver_failure(&self) -> bool {
        match self {
            Error::SingularMatrix { .. }
            | Error::SolverDiverged { .. }
            | Error::NonPhysical(_) => true,
            Error::NodeFailed { source, .. } | Error::StepFailed { source, .. } => {
                source.is_solver_failure()
            }
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
