//! Library half of the `fredholm-se` binary: run configuration with
//! per-example defaults, the replication sweep, CSV row and summary I/O,
//! and the analytic solve fixtures. Everything the binary does is callable
//! from here so integration tests can exercise it in-process.

mod config;
mod report;
mod rows;
mod run;
mod toy;

pub use config::{
    build_bundle, load_config, parse_config, ExampleId, Resolved, ResolvedAnalytic,
    ResolvedRun, RunConfig, SolverKind, SolverSpec, Tol,
};
pub use report::{render_table, summarize, SolverSummary};
pub use rows::{
    parse_rows_csv, read_rows_csv, rows_header, rows_to_csv, write_atomic, SimulationRow,
};
pub use run::{
    estimate, simulate, solve_analytic, thread_count, trace, EstimateJson, SolveOutcome,
};
pub use toy::{gen_toy, toy_bundle, TOY_BETA_STAR};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(String),
}

impl CliError {
    /// Process exit code: 2 configuration, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}
