use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("attitude singularity: |pitch| = {pitch:.6} rad is within the guard of pi/2")]
    Singularity { pitch: f64 },

    #[error("invalid rotor index {0}, expected 1..=4")]
    InvalidRotor(usize),

    #[error("effectiveness matrix is rank deficient (rank {rank}, expected 6)")]
    RankDeficient { rank: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("Riccati iteration did not converge after {iterations} iterations (residual {residual:e})")]
    RiccatiNotConverged { iterations: usize, residual: f64 },

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("simulation aborted at t = {time:.3} s: {reason}")]
    SimulationAborted { time: f64, reason: String },

    #[error("empty trace")]
    EmptyTrace,

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
