//! Command-line companion to the `nlmevem` library: dataset CSV IO, JSON
//! configuration and result files, and the fit / simulate / loglik / ebe
//! subcommands.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod result_io;
