use thiserror::Error;

/// Errors raised by the simulation and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("dense eigensolver limited to cutoff {max}, got {cutoff}")]
    TooLarge { cutoff: usize, max: usize },

    #[error("eigenvalue pairing failed near {eigenvalue}: {reason}")]
    Degeneracy { eigenvalue: String, reason: String },

    #[error("eigensolver did not converge: {converged} of {wanted} modes within tolerance (worst residual {residual:.3e})")]
    NonConvergence {
        wanted: usize,
        converged: usize,
        residual: f64,
    },

    #[error("steady state is not unique: {0}")]
    NonUniqueSteadyState(String),

    #[error("gauge singular at {parameter}: |tr[O rho1]| = {value:.3e}")]
    GaugeSingular { parameter: String, value: f64 },

    #[error("trace drift {drift:.3e} exceeds limit at t = {time}; reduce dt (currently {dt:.3e})")]
    StepSize { drift: f64, time: f64, dt: f64 },

    #[error("singular extraction system at r = {r} (condition number {condition:.3e})")]
    ExtractionDegenerate { r: f64, condition: f64 },

    #[error("cutoff not converged: |dn| = {delta_n:.3e} between d = {cutoff} and d = {next} at parameter {parameter}")]
    CutoffNotConverged {
        cutoff: usize,
        next: usize,
        parameter: f64,
        delta_n: f64,
    },

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("{0}")]
    Protocol(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        !matches!(
            self,
            Error::InvalidParams(_) | Error::Protocol(_) | Error::Io(_) | Error::Csv(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
