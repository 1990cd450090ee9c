//! Trace-driven simulation of early-exit classifier cascades split between an
//! edge device and a cloud server.
//!
//! The crate works on precomputed logits (one vector per exit point per
//! sample) and provides:
//!
//! - [`trace`]: the JSON-Lines logit trace format, validation, splitting and batching;
//! - [`calib`]: softmax, temperature scaling, NLL and the temperature fit;
//! - [`cascade`]: the confidence-threshold exit/offload rule;
//! - [`latency`]: a parametric device/uplink/cloud latency model;
//! - [`metrics`]: offloading probability, accuracies, inference outage and
//!   missed-deadline probability, plus parameter sweeps;
//! - [`syngen`]: synthetic trace generators with known calibration ground
//!   truth, and brute-force oracles used by the test suites;
//! - [`cli`]: the `offload-calib` command-line front end.

pub mod calib;
pub mod cascade;
pub mod cli;
pub mod config;
pub mod error;
pub mod latency;
pub mod metrics;
pub mod syngen;
pub mod trace;

pub use error::{Error, Result};
