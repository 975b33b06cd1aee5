//! Library face of the command-line driver; the binary stays a thin shell
//! so tests can call every command in-process.

pub mod commands;
pub mod config;
pub mod csvio;
pub mod manifest;
pub mod seeds;
