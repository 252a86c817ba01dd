//! Multi-type continuous-state branching processes with immigration (CBI).
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] admissible parameter sets and their jump-measure functionals,
//! * [`spectral`] the mean matrix `B̃`, its exponential and Perron structure,
//! * [`riccati`] branching/immigration mechanisms and the Laplace-exponent flow,
//! * [`moments`] closed-form first and second moments with their asymptotics,
//! * [`simulate`] a reproducible Euler/compound-Poisson path simulator,
//! * [`verify`] Monte Carlo checks tying simulated ensembles to the formulas.

pub mod error;
pub mod format;
pub mod model;
pub mod moments;
pub mod quad;
pub mod riccati;
pub mod simulate;
pub mod spectral;
pub mod verify;

pub use error::{Error, Result};
pub use model::{load_model, validate_admissible, Atom, JumpMeasure, ModelParams, ValidationReport};
pub use spectral::{Criticality, SpectralData};
