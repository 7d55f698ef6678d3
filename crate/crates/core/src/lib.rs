//! Mean-teacher proximal unlearning: losses, divergences, exact Gauss-Newton
//! curvature and natural-gradient references for small softmax models.

// Validation uses `!(x > 0.0)` so that NaN is rejected along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod curvature;
pub mod divergence;
pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod optimizer;

pub use error::{Error, Result};
