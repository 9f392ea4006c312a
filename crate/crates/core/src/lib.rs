//! Synthetic-data benchmark suite for quantifying how much glucose
//! forecasters actually use driver inputs (insulin, meals, exercise).
//!
//! The crate simulates virtual patients under a realistic behavior policy,
//! degrades the event logs with configurable fidelity noise, trains matched
//! univariate/multivariate forecaster pairs, and measures the loss gap
//! between them with bootstrap confidence intervals, permutation-based
//! attribution, and counterfactual causal probes.

pub mod config;
pub mod delta;
pub mod encoders;
pub mod error;
pub mod fidelity;
pub mod forecast;
pub mod io;
pub mod numeric;
pub mod physio;
pub mod pipeline;
pub mod plot;
pub mod policy;
pub mod probe;
pub mod report;
pub mod rng;
pub mod timeline;

pub use error::{Error, Result};
