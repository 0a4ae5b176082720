//! Experiment harness: TOML configuration, replica orchestration with
//! derived streams, CSV/manifest persistence, and binary field storage.

pub mod config;
pub mod experiment;
pub mod field_io;

pub use config::{ExperimentConfig, ExperimentKind, Overrides};
pub use experiment::{run_experiment, ReportRow, RunOutcome, Verdict};
pub use field_io::{dump_field, load_field, read_field, write_field, FORMAT_VERSION};
