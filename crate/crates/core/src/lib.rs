//! Numerical engine for linear-quadratic social optima of large populations
//! of heterogeneous agents with forward-backward state dynamics.

pub mod model;
pub mod numkit;
pub mod assembly;
pub mod riccati;
pub mod engine;
pub mod meanfield;
pub mod population;
pub mod oracle;
