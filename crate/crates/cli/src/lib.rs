//! Batch front end for the axisforge pipeline: dataset rendering, training,
//! inference, evaluation and the oracle suite.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod infer;
pub mod manifest;
pub mod oracle;
pub mod train;

pub use config::RunConfig;
pub use error::{CliError, Result};
