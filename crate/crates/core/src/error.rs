use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("matrix not positive definite{}: {context}", .iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    NotPositiveDefinite {
        context: String,
        iteration: Option<usize>,
    },

    #[error("collinear design columns: {}", .columns.join(", "))]
    Collinear { columns: Vec<String> },

    #[error("perfect separation on covariate `{covariate}`")]
    Separation { covariate: String },

    #[error("optimizer did not converge from any start (best loglik {best_loglik}, max |gradient| {max_gradient}, {iterations} iterations)")]
    Convergence {
        best_loglik: f64,
        max_gradient: f64,
        iterations: usize,
    },

    #[error("singular information matrix")]
    SingularInformation,
}

impl Error {
    /// True for errors caused by the inputs (files, configuration, arguments)
    /// rather than by a numerical failure.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::Parse { .. }
                | Error::Schema(_)
                | Error::Consistency(_)
                | Error::InvalidArgument(_)
        )
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse {
                row,
                column: String::new(),
                message: format!("{other:?}"),
            },
        }
    }
}
