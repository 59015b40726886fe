//! Command-line experiment runner for the repeater chain simulator.

pub mod args;
pub mod experiment;
pub mod oracle_suite;
pub mod spec;

pub use experiment::{execute, run_experiment, ExperimentReport, RunError, SummaryRow};
pub use oracle_suite::{oracle_suite, oracle_suite_with, OracleOptions, OracleSuiteReport};
pub use spec::{ExperimentSpec, Format, Mode, ParseError, SpecLayer};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 1;
    pub const RUNTIME: i32 = 2;
    pub const ORACLE: i32 = 3;
}
