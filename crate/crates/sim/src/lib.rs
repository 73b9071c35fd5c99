//! Deterministic simulation of reporters, a translator and a collector
//! exchanging telemetry reports over lossy links, plus the experiment suites
//! built on top of it.

pub mod config;
pub mod engine;
pub mod suites;
pub mod table;
pub mod workload;

pub use config::{ConfigError, SimConfig};
pub use engine::{run, RunReport};
pub use suites::{run_suite, Grid, SuiteError};
pub use table::Table;
