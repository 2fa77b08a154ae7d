use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no convergence in {what} after {iterations} iterations (last residual {residual:.3e})")]
    Convergence {
        what: String,
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("right-hand side not orthogonal to the kernel: inner product {inner:.3e} exceeds {tol:.3e}")]
    NearSingularRhs { inner: f64, tol: f64 },

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("collision: minimal distance {distance:.3e} at t = {time:.6e}")]
    Collision { time: f64, distance: f64 },

    #[error("unsupported order {order} for {what} (implemented up to {max})")]
    UnsupportedOrder { what: String, order: usize, max: usize },

    #[error("domain too small: {0}")]
    Domain(String),

    #[error("non-finite values detected at t = {time}")]
    BlowUp { time: f64 },

    #[error("fit failure: {0}")]
    Fit(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("resource limit: {0}")]
    Resource(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
