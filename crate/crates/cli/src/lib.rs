//! Experiment runner for `nmqsd`: configuration files, runs, parameter
//! sweeps, CSV output and self-validation.

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiment;
pub mod output;
pub mod validate;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const VALIDATION: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const QUALITY: u8 = 3;
}
