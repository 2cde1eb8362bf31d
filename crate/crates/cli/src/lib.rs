//! Experiment driver for FOM-EnOpt and the adaptive surrogate loop: TOML run
//! configurations, artifact directories, run comparison and plot data.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod run;

pub use config::{Algorithm, RunConfig};
pub use error::{CliError, CliResult};
pub use run::{compare, emit_plots, run, validate_deck, Comparison, RunOutcome};
