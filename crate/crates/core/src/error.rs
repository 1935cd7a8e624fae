use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    /// A non-finite value appeared while integrating.
    #[error("{stage}: blow-up (non-finite value) at t = {time}")]
    BlowUp { stage: &'static str, time: f64 },

    #[error("{solver} did not converge in {iterations} iterations (residual {residual:e})")]
    NotConverged {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("characteristic inversion failed at (t, x) = ({t}, {x})")]
    InversionFailed { t: f64, x: f64 },

    #[error("evaluation at t = {t} is outside the classical regime (blow-up at {blowup})")]
    OutsideClassicalRegime { t: f64, blowup: f64 },

    #[error("sample {index} failed: {source}")]
    SampleFailed {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("objective is unbounded below")]
    Unbounded,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
