//! Command failures and their exit codes.

use std::io;
use std::path::PathBuf;

use mflq::meanfield::MeanFieldError;
use mflq::model::ModelError;
use mflq::oracle::OracleError;
use mflq::population::PopulationError;
use thiserror::Error;

/// Exit code of a successful run.
pub const EXIT_OK: u8 = 0;
/// Exit code for unclassified failures.
pub const EXIT_OTHER: u8 = 1;
/// Exit code for violated model assumptions or a rejected population.
pub const EXIT_ASSUMPTION: u8 = 2;
/// Exit code for unreadable or malformed configurations.
pub const EXIT_PARSE: u8 = 3;
/// Exit code for a failed decoupling field.
pub const EXIT_RICCATI: u8 = 4;
/// Exit code for a failed simulation.
pub const EXIT_SIMULATION: u8 = 5;
/// Exit code for an oracle instance outside the supported bounds.
pub const EXIT_ORACLE_BOUNDS: u8 = 6;

/// Failure of a CLI command.
#[derive(Debug, Error)]
pub enum CliError {
    /// The configuration could not be read.
    #[error("cannot read {path}: {source}")]
    Read {
        /// File that failed.
        path: PathBuf,
        /// Underlying error.
        source: io::Error,
    },
    /// The configuration or manifest is malformed.
    #[error("{0}")]
    Parse(String),
    /// Model assumptions are violated.
    #[error("assumption check failed:\n{0}")]
    Assumption(String),
    /// The population does not reproduce the limiting type distribution.
    #[error("N = {agents} gives eps_N = {eps_n:.6e}; pass --allow-epsN to accept")]
    EpsN {
        /// Population size.
        agents: usize,
        /// Deviation of the empirical type distribution.
        eps_n: f64,
    },
    /// Invalid command-line arguments.
    #[error("{0}")]
    Usage(String),
    /// Consistency system failure.
    #[error(transparent)]
    MeanField(#[from] MeanFieldError),
    /// Simulation failure.
    #[error(transparent)]
    Population(#[from] PopulationError),
    /// Oracle failure.
    #[error(transparent)]
    Oracle(#[from] OracleError),
    /// Output could not be written.
    #[error("cannot write {path}: {source}")]
    Write {
        /// File that failed.
        path: PathBuf,
        /// Underlying error.
        source: io::Error,
    },
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Parse(e.to_string())
    }
}

fn meanfield_code(e: &MeanFieldError) -> u8 {
    match e {
        MeanFieldError::Riccati(_) => EXIT_RICCATI,
        _ => EXIT_OTHER,
    }
}

fn population_code(e: &PopulationError) -> u8 {
    match e {
        PopulationError::Riccati { .. } => EXIT_RICCATI,
        PopulationError::NonFinite { .. } => EXIT_SIMULATION,
        _ => EXIT_OTHER,
    }
}

impl CliError {
    /// Process exit code for this failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Read { .. } | CliError::Parse(_) => EXIT_PARSE,
            CliError::Assumption(_) | CliError::EpsN { .. } => EXIT_ASSUMPTION,
            CliError::Usage(_) | CliError::Write { .. } => EXIT_OTHER,
            CliError::MeanField(e) => meanfield_code(e),
            CliError::Population(e) => population_code(e),
            CliError::Oracle(e) => match e {
                OracleError::TooLarge { .. } | OracleError::Restriction(_) => EXIT_ORACLE_BOUNDS,
                OracleError::MeanField(e) => meanfield_code(e),
                OracleError::Population(e) => population_code(e),
                OracleError::Model(_) => EXIT_PARSE,
                _ => EXIT_OTHER,
            },
        }
    }
}
