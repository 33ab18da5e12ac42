//! Feature files, checkpoints, reports and the `itm` command line on top
//! of [`itm_core`].

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod format;
pub mod report;

pub use error::{CliError, Result};
