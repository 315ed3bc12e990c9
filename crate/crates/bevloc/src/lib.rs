//! File formats, parallel orchestration and the command-line tool built on
//! `bevloc-core`.

mod binary;
pub mod cli;
pub mod cloud_io;
pub mod config;
pub mod db_file;
pub mod error;
pub mod exec;
pub mod pgm;
pub mod poses;
pub mod report;
pub mod weights;

pub use binary::DecodeError;
pub use error::{IoError, Result};
