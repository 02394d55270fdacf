//! Dataset generation, training, evaluation and ablation reports for the
//! one-shot segmentation network, as library calls behind the `siamseg`
//! binary.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
