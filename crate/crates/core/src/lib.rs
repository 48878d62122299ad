//! Metric learning with triplet, N-tuple, PN-tuple and MPN-tuple losses.
//!
//! Every loss returns its value together with analytic gradients for its
//! inputs and trainable parameters. All arithmetic is `f64`.

pub mod batch;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod math;
pub mod meta;
pub mod objective;
pub mod record;
pub mod sampling;

pub use error::{Error, Result};
