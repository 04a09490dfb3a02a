use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument was outside its documented range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A stage schedule whose composed budget would exceed the requested
    /// (epsilon, delta). Reports the first overshooting stage so the
    /// accounting stays auditable.
    #[error(
        "infeasible schedule: stage {stage} pushes cumulative {quantity} to {accumulated:.6e}, \
         exceeding the budget {limit:.6e} (overshoot {overshoot:.6e})"
    )]
    InfeasibleSchedule {
        stage: usize,
        quantity: &'static str,
        accumulated: f64,
        limit: f64,
        overshoot: f64,
    },

    /// A mechanism error annotated with the trial that produced it.
    #[error("trial {trial} of {mechanism} (k={k}): {source}")]
    Trial {
        mechanism: String,
        k: usize,
        trial: u64,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// Attach trial context to a mechanism error.
    pub fn in_trial(self, mechanism: impl Into<String>, k: usize, trial: u64) -> Self {
        Error::Trial {
            mechanism: mechanism.into(),
            k,
            trial,
            source: Box::new(self),
        }
    }
}
