use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Model coefficients violate a structural requirement (rank, definiteness).
    #[error("model error: {0}")]
    Model(String),

    /// A postcondition that should be impossible to break was broken.
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("simulation fault on path {path_index} at t={time}: {reason}; state {state:?}")]
    SimulationFault {
        path_index: u64,
        time: f64,
        reason: String,
        state: Vec<f64>,
    },

    /// Regulation events piled up past the explosion cap.
    #[error("viability fault on path {path_index} (seed {seed}): {events} regulation events by t={time}")]
    Viability {
        path_index: u64,
        seed: u64,
        events: usize,
        time: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
