use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("Fock cutoff must be at least 1, got {0}")]
    InvalidCutoff(usize),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("state is not normalized (norm² = {0})")]
    NotNormalized(f64),

    #[error("operator is not Hermitian (max deviation {0:e})")]
    NotHermitian(f64),

    #[error("transmission coefficient {0} outside [0, 1]")]
    InvalidTransmission(f64),

    #[error("invalid density matrix: {0}")]
    InvalidDensityMatrix(String),

    #[error("cutoff N = {n} exceeds the trace-out memory guard (N <= {max}); set the override to proceed")]
    CutoffTooLarge { n: usize, max: usize },

    #[error("mean particle number {nbar} outside (0, {max})")]
    InvalidMeanNumber { nbar: f64, max: f64 },

    #[error("probe search infeasible: {0}")]
    Infeasible(String),

    #[error("dominant eigenvalue {dominant:e} not separated from next {next:e}; loss too large for the first-order expansion")]
    BranchCrossing { dominant: f64, next: f64 },

    #[error("perturbation {0} outside [0, 0.2]")]
    InvalidPerturbation(f64),

    #[error("likelihood underflow at iteration {iteration}: posterior mass vanished on a {points}-point grid [{lower}, {upper}]")]
    LikelihoodUnderflow {
        iteration: usize,
        points: usize,
        lower: f64,
        upper: f64,
    },

    #[error("invalid phase grid: {0}")]
    InvalidGrid(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid POVM: {0}")]
    InvalidPovm(String),

    #[error("malformed amplitude file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
