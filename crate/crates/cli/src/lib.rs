//! Library half of the `drcc` command-line tool, split out so integration
//! tests can drive the commands without spawning processes.

pub mod commands;
pub mod config;

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "DRCC_WORKERS";
