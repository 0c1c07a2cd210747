use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input data / configuration.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("column `{0}` not found")]
    MissingColumn(String),

    #[error("cluster-constant design is rank deficient; collinear columns: {}", .columns.join(", "))]
    SingularCorrection { columns: Vec<String> },

    #[error("residual variance must be positive, got {0}")]
    NonPositiveVariance(f64),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("all fixed-effect candidates are degenerate (zero-variance columns)")]
    NoCandidates,

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("no convergence after {iterations} iterations (best log-likelihood {best_loglik})")]
    NoConvergence {
        iterations: usize,
        best_loglik: f64,
        best: Box<crate::model::ParamState>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by the user's input rather than by numerics.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Input(_)
            | Error::MissingColumn(_)
            | Error::SingularCorrection { .. }
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => true,
            Error::AtIteration { source, .. } => source.is_input_error(),
            _ => false,
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Error {
        Error::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }
}
