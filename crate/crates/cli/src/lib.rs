//! Batch front end: TOML run configs in, feedback fields, reports and a JSON
//! summary out.

pub mod config;
pub mod demos;
pub mod pipeline;
pub mod summary;
pub mod validate;

pub use config::{RunConfig, SCHEMA_VERSION};
pub use pipeline::{run, RunOptions, RunOutcome, OUTPUT_DIR_ENV};
pub use summary::{RunStatus, Summary};
pub use validate::{validate_config, Violation};
