//! Command-line front end: training, evaluation, gradient checks, synthetic
//! data and warping demos.

pub mod commands;
pub mod config;
pub mod gradsuite;

use egodepth::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;

/// Thread-count variable. Every command runs on one thread; the variable is
/// only validated.
pub const THREADS_ENV: &str = "EGODEPTH_THREADS";

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::NonFiniteLoss(_) | Error::NonFiniteGradient { .. } => EXIT_NON_FINITE,
        _ => EXIT_RUNTIME,
    }
}

pub fn check_threads_env() -> egodepth::Result<()> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(()),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(()),
    }
}
