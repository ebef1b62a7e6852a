// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod capri;
pub mod environment;
pub mod error;
pub mod estimator;
pub mod gp;
pub mod harness;
pub mod kernels;
pub mod numerics;

pub use error::{Error, Result};
