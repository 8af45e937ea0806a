//! Command line and HTTP job service around `moveact-core`.

pub mod cli;
pub mod http;
pub mod jobs;
