//! Scenario runner and audit driver around the `sandbox-measure` model.
//!
//! Scenario files describe one API's timeline (sources and triggers, or
//! storage events) plus the ad-tech's aggregation turns; running one
//! produces a reports file, a transcript, a privacy trace, and an updated
//! budget ledger. Audit configs run exact DP checks and scenario
//! walkthroughs with noise disabled. Everything is deterministic given
//! the scenario seed.

pub mod audit;
pub mod runner;
pub mod scenario;

use thiserror::Error;

/// Exit codes the binary maps outcomes to. An aborted run is not an
/// error — outputs and the ledger are still written — but it gets its
/// own code so scripts can see it.
pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_ABORTED: u8 = 2;
pub const EXIT_SCHEMA: u8 = 3;
pub const EXIT_LEDGER: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("ledger: {0}")]
    Ledger(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => EXIT_FAILURE,
            CliError::Schema(_) => EXIT_SCHEMA,
            CliError::Ledger(_) => EXIT_LEDGER,
        }
    }
}
