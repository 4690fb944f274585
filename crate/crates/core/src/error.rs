use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("vectors and matrices must be non-empty")]
    Empty,

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("matrix is singular or ill-conditioned: pivot {pivot:e} below {threshold:e}")]
    Singular { pivot: f64, threshold: f64 },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("not available: {0}")]
    NotAvailable(String),

    /// A Neumann term became non-finite; `k` is the index of the offending term.
    #[error("Neumann series diverged at term k={k} (inner learning rate too large?)")]
    Divergence { k: usize },

    #[error("inner iteration diverged at step {step}")]
    InnerDivergence { step: usize },

    #[error("conjugate gradient breakdown at iteration {iteration}: curvature {curvature:e}")]
    CgBreakdown { iteration: usize, curvature: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("round {round}: {source}")]
    Round { round: usize, source: Box<Error> },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn in_round(self, round: usize) -> Self {
        match self {
            e @ Error::Round { .. } => e,
            e => Error::Round {
                round,
                source: Box::new(e),
            },
        }
    }
}
