//! Library side of the `warpspace` command: configuration parsing, the
//! subcommand implementations and image export.

pub mod commands;
pub mod config;
pub mod pgm;
