use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The normal matrix could not be inverted within the condition-number cap.
    #[error("singular system{}: condition number {condition:.3e} exceeds cap", agent_suffix(.agent))]
    SingularSystem {
        agent: Option<usize>,
        condition: f64,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported case feature: {0}")]
    Unsupported(String),

    #[error("power flow did not converge after {iterations} iterations (mismatch {mismatch:.3e})")]
    PowerFlowDiverged { iterations: usize, mismatch: f64 },
}

fn agent_suffix(agent: &Option<usize>) -> String {
    match agent {
        Some(a) => format!(" at agent {a}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Attach an agent index to a singular-system error.
    pub fn at_agent(self, agent: usize) -> Self {
        match self {
            Error::SingularSystem { condition, .. } => Error::SingularSystem {
                agent: Some(agent),
                condition,
            },
            other => other,
        }
    }
}
