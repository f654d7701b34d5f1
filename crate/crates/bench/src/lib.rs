//! Experiment runner and invariant-check harness for `timescore`.

pub mod checks;
pub mod config;
pub mod error;
pub mod output;
pub mod reproduce;
pub mod tasks;
