//! Online aggregation of Kalman-filter experts.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod aggregation;
pub mod error;
pub mod harness;
pub mod kalman;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod smoother;

pub use error::{KaoError, Result};
