//! File formats, drivers and command-line plumbing around
//! [`mapdistill_core`].

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod report;
pub mod runner;

pub use error::{CliError, Result};
pub use mapdistill_core as core;
