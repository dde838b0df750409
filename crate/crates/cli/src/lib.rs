//! Command-line front end: run configuration and the label, train, eval and
//! export commands.

pub mod commands;
pub mod config;
