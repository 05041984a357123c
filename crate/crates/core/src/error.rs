use thiserror::Error;

/// Errors raised across the fitting and analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch in {block}: {message}")]
    Dimension { block: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("moment inversion infeasible: {0}")]
    InversionInfeasible(String),

    #[error("non-finite ELBO at cell (site {site}, year {year}): {message}")]
    NonFiniteElbo {
        site: usize,
        year: usize,
        message: String,
    },

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("singular information matrix: {0}")]
    SingularInformation(String),

    #[error("reconstruction ambiguous: {0}")]
    ReconstructionAmbiguous(String),

    #[error("unsupported design: {0}")]
    UnsupportedDesign(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("sampling aborted: {0}")]
    SamplingAborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors that stem from numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteElbo { .. }
                | Error::SingularInformation(_)
                | Error::ReconstructionAmbiguous(_)
                | Error::InversionInfeasible(_)
                | Error::SamplingAborted(_)
                | Error::Initialization(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
