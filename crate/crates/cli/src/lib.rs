//! Experiment harness: JSON-configured sweeps over prompt length, training
//! length and training-set size, with CSV/SVG output, the oracle suite behind
//! `icl verify` and the diversity report behind `icl diversity`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diversity;
pub mod error;
pub mod experiment;
pub mod fit;
pub mod plot;
pub mod verify;

pub use config::{Axis, ExperimentConfig};
pub use error::{HarnessError, Result};
pub use experiment::{run_experiment, run_sweep, with_threads, SweepResult};
pub use fit::{fit_slope, shifted_relative_error, tail_slope, Slope};
