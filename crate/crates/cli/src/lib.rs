//! Image and checkpoint formats, run configuration, corpora and the
//! library side of the `hodinet` command-line tool.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod images;
pub mod netpbm;
pub mod run;
pub mod selftest;

pub use error::{CliError, Result};
