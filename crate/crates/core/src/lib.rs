//! Numerical laboratory for two-weight dyadic harmonic analysis.

pub mod alpert;
pub mod cli;
pub mod config;
pub mod constants;
pub mod corona;
pub mod error;
pub mod lattice;
pub mod measures;
pub mod operators;
pub mod report;
pub mod rng;
pub mod sampling;
pub mod verify;

pub use error::{DyadError, Result};
