//! Files, experiments and the command line around `dpsguard-core`.

pub mod artifacts;
pub mod error;
pub mod experiments;
pub mod formats;
pub mod spec;

pub use dpsguard_core as core;
pub use error::{CliError, Result};
