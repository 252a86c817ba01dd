use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("schema error in `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("not irreducible: the mean matrix has a non-trivial invariant coordinate block")]
    NotIrreducible,

    #[error("defective spectrum: {0}")]
    DefectiveSpectrum(String),

    #[error("flow left the cone at t = {time}: component {component} = {value:e}")]
    FlowLeftCone {
        time: f64,
        component: usize,
        value: f64,
    },

    #[error("flow blew up at t = {time}")]
    BlowUp { time: f64 },

    #[error("step-halving check failed: relative change {change:e} exceeds {limit:e}")]
    StepHalving { change: f64, limit: f64 },

    #[error("simulation error on path {path} at step {step}: {message}")]
    Simulation {
        path: usize,
        step: usize,
        message: String,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),
}
