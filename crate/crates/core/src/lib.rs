//! Quasi time-optimal receding-horizon control.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod cost;
pub mod error;
pub mod integrator;
pub mod model;
pub mod ocp;
pub mod rhc;
pub mod synthesis;

pub use error::{Error, Result};
