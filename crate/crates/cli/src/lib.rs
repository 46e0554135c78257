//! Experiment driver: TOML configs in, CSV tables and a JSON manifest out.

pub mod config;
pub mod error;
pub mod experiments;
pub mod oracle;
pub mod run;

pub use config::{DirectionSpec, Experiment, ExperimentConfig};
pub use error::{CliError, CliResult};
pub use experiments::{execute, Check, Outcome};
pub use run::{run, Manifest, RunSummary};
