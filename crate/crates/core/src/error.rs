use thiserror::Error;

/// Errors surfaced by model validation, the grid numerics, the simulator and
/// the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("routing matrix spectral radius {0} is not strictly below 1: network is not open")]
    SpectralRadius(f64),
    #[error("matrix inversion failed: {0}")]
    Singular(String),
    #[error("model validation failed: {0}")]
    Validation(String),
    #[error("heavy-traffic scale factor is nonpositive (sigma = {sigma}, r = {r})")]
    InvalidScale { sigma: f64, r: f64 },
    #[error("negative workload {0} passed to the lifting map")]
    NegativeWorkload(f64),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("series for the feedback kernel did not converge within {0} terms")]
    NonConvergence(usize),
    #[error("tail mass beyond the grid end exceeds tolerance: deficit {deficit:.3e} of total {total:.3e}")]
    Truncation { deficit: f64, total: f64 },
    #[error("mass deficit {0:.3e} in distribution tail exceeds tolerance")]
    MassDeficit(f64),
    #[error("function is not strictly increasing at grid index {0}")]
    NotIncreasing(usize),
    #[error("fluid data is not critical: |rho - 1| = {0:.3e}")]
    NotCritical(f64),
    #[error("route length cap of {0} steps exceeded; routing matrix is nearly closed")]
    RouteCapExceeded(usize),
    #[error("event cap of {0} exceeded")]
    EventCapExceeded(u64),
    #[error("trajectory horizon {horizon} too short for diffusion scale r = {r}, T = {t}")]
    HorizonTooShort { horizon: f64, r: f64, t: f64 },
    #[error("moment order {0} not supported on gridded tails")]
    UnsupportedMoment(u32),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the CLI: 1 I/O or config, 2 model
    /// validation, 3 numeric failure, 4 event/route cap.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Config(_) => 1,
            Error::Validation(_) | Error::SpectralRadius(_) | Error::InvalidScale { .. } => 2,
            Error::RouteCapExceeded(_) | Error::EventCapExceeded(_) => 4,
            _ => 3,
        }
    }
}
