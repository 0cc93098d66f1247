//! Command-line harness: run configuration, the commands, and attention
//! overlays.

pub mod commands;
pub mod config;
pub mod overlay;

use mstr_core::Error;

/// 2 for numeric failures, 1 for everything else.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 2,
        _ => 1,
    }
}
