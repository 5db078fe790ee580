use thiserror::Error;

/// Errors produced by schedule construction, world queries, scoring,
/// selection, and the oracle computations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("timestep {t} is not on the inference grid")]
    OffGrid { t: usize },

    #[error("timestep {t} outside valid range [{lo}, {hi}]")]
    TimestepRange { t: usize, lo: usize, hi: usize },

    #[error("no class {class} in timestep selection")]
    MissingClass { class: usize },

    #[error("feasible timestep set is empty for snr in [{gamma_min}, {gamma_max}]")]
    EmptyFeasibleSet { gamma_min: f64, gamma_max: f64 },

    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { pivot: f64, index: usize },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("quadrature grid too coarse: covered mass {mass} < {required}")]
    QuadratureMass { mass: f64, required: f64 },

    #[error("{0}")]
    Evaluation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
