//! Library half of the command-line driver: configuration parsing and
//! validation, artifact serialization with stable float formatting, and the
//! per-command pipelines. The binary in `main.rs` is a thin argument-parsing
//! shell over this crate so the integration tests can drive the pipelines
//! directly.

pub mod artifacts;
pub mod config;
pub mod pipeline;

pub use artifacts::{json_string, write_csv, write_json, SCHEMA_VERSION};
pub use config::{ConfigError, ExperimentConfig};
pub use pipeline::{
    run_ldt, run_report, run_separation, run_solve, run_spectrum, PipelineError,
};

/// Process exit codes of every command.
pub mod exit_codes {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG_ERROR: i32 = 2;
    pub const CONVERGENCE_FAILURE: i32 = 3;
    pub const INVARIANT_VIOLATION: i32 = 4;
}
