//! Command-line driver for embedding-transfer experiments: configuration
//! files, checkpoints, and the `train-source`, `transfer`, `eval` and
//! `gradcheck` commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;

pub use error::{CliError, CliResult};

/// Sizes the global thread pool from `EXF_THREADS`, if set.
pub fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("EXF_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("EXF_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("cannot size thread pool: {e}")))
}
