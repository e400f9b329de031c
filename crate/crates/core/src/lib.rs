//! Renewable capacity installation under jump-driven capacity factor and
//! demand dynamics.
//!
//! Two solvers are provided: a backward deep BSDE solver that prices a
//! threshold installation rule (and a grid selector over thresholds), and a
//! deep feedback-control trainer. A plain Monte Carlo estimate of the cost
//! functional serves as an independent oracle for both.

pub mod bsde;
pub mod config;
pub mod control;
pub mod error;
pub mod model;
pub mod nn;
pub mod rng;
pub mod selector;

pub use error::{Error, Result};
