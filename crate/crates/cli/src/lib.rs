//! Configuration and experiment runners behind the `mfcontrol` binary.

pub mod config;
pub mod run;

pub use config::{parse_config, ConfigError, Experiment, ExperimentConfig, Profile};
pub use run::{run, Outcome};
