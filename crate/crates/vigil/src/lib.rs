//! Configuration, the offline command pipeline and the live session service
//! built on `vigil-core`.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod service;

pub use commands::CliError;
pub use config::{ConfigError, FrameworkConfig};
