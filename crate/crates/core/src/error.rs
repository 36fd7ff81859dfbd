use thiserror::Error;

/// Errors raised by the numerical pipeline.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite state at time index {index} (t = {time})")]
    NonFinite { index: usize, time: f64 },

    #[error("fast step underflow: epsilon = {epsilon:e}, macro step = {step:e}")]
    StepUnderflow { epsilon: f64, step: f64 },

    #[error("time meshes differ")]
    MeshMismatch,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("{fraction:.3e} of the density mass sits in the outer 5% of nodes; widen the grid")]
    BoundaryMass { fraction: f64 },

    #[error("stationary problem is not uniquely solvable: spectral gap ratio {ratio:e}")]
    NullSpace { ratio: f64 },

    #[error("Fredholm condition violated for component {component}: |int rhs*pi| = {defect:e}")]
    Fredholm { component: usize, defect: f64 },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("cutoff shell carries no density mass; use a smaller radius or a wider grid")]
    EmptyShell,

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("integrand not centered at y-node {node} (y = {y:?}): defect {defect:e}")]
    Centering { node: usize, y: Vec<f64>, defect: f64 },

    #[error("{what} left the tabulated range at t = {time}")]
    OutOfRange { what: String, time: f64 },

    #[error("no radius certifies coercivity on this grid (K = {k}); widen the grid")]
    NoCoercivity { k: f64 },

    #[error("minimizer did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NotConverged { iterations: usize, grad_norm: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("martingale sampler does not track quadratic variation")]
    MissingQuadraticVariation,

    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
