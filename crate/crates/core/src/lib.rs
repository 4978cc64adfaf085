//! Core of a desk-scale laboratory for reinforcement-learning fine-tuning of
//! flow models: policy-gradient objectives, likelihood estimators and
//! samplers, cross-checked against closed-form optima on low-dimensional
//! synthetic targets.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! wall-clock timing live in the companion `flowrl-lab` crate.
#![no_std]
#![forbid(unsafe_code)]
// Negated comparisons are how NaN gets rejected in validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod config;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod likelihood;
pub mod numerics;
pub mod objectives;
pub mod oracles;
pub mod rng;
pub mod sampler;
pub mod training;

pub use error::{Error, Result};
