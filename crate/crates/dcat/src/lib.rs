//! File formats, checkpoints, experiment runner and command-line interface
//! around `dcat-core`.

pub mod archive;
pub mod checkpoint;
pub mod cli;
pub mod config_file;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod inspect;
pub mod netpbm;
pub mod report;

pub use error::{AppError, AppResult, ErrorKind};
