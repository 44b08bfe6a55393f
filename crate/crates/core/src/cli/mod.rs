//! Configuration loading and report rendering behind the `malleable` binary.

pub mod config;
pub mod experiment;

/// Exit status of the command-line tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Success = 0,
    Config = 2,
    Unstable = 3,
    Internal = 4,
}
