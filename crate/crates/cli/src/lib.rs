//! Command-line workflows and the local HTTP API for xsight.

pub mod cli;
pub mod config;
pub mod pipeline;
pub mod serve;
