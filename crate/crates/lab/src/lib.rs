//! Experiment harness around `flowrl-core`: JSON configs, run directories,
//! design-space sweeps, oracle exports and gradient checks, all driven by
//! the `flowrl` binary.

// Negated comparisons are how NaN gets rejected in validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod run;
pub mod sweep;

pub use error::{LabError, LabResult};
