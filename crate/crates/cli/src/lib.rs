//! Configuration-driven front end: config schema, subcommands and exit codes.

pub mod commands;
pub mod config;

pub use commands::{Command, Context, Outcome};
pub use config::ExperimentConfig;

use bsd2dtn_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}
