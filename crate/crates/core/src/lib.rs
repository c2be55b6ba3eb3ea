//! Multi-exit classifiers: training with a relevancy + diversity objective and
//! evaluation of early-exit strategies.
//!
//! * [`math`]: probability primitives
//! * [`model`]: the layered network with one internal classifier per layer
//! * [`objective`]: losses, diagnostics and the trainer
//! * [`strategy`]: exit rules (entropy, max-prob, patience, voting, oracle,
//!   hybrid)
//! * [`harness`]: datasets, exit logs, sweeps and reports
//! * [`cli`]: the `exitwise` command line

pub mod cli;
pub mod error;
pub mod harness;
pub mod math;
pub mod model;
pub mod objective;
pub mod strategy;

pub use error::{Error, Result};
