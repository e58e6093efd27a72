//! Command-line front end for the `ptd` crate: CSV ingestion, analysis
//! configuration, coverage simulations and JSON output.

pub mod config;
pub mod error;
pub mod ingest;
pub mod run;

pub use error::{CliError, Result};
