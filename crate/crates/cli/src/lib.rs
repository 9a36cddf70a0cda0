//! Driver for the splatstream pipeline: synthetic scene generation,
//! training and grouping, trace-driven streaming, and report tables.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;

pub use config::{Overrides, RunConfig};
pub use error::{CliError, CliResult};
