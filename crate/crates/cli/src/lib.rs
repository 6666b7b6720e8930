//! File formats, corpus directories and the command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus_dir;
pub mod error;
pub mod report;
pub mod vcf;
pub mod verify;

pub use error::CliError;
pub use mdvc_core;
