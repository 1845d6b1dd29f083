// Negated comparisons such as `!(x > 0.0)` are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bspline;
pub mod dataset;
pub mod error;
pub mod estimation;
pub mod etp;
pub mod gauss_approx;
pub mod kernels;
pub mod linalg;
pub mod optim;
pub mod prediction;
pub mod robustness;
pub mod simulation;

pub use error::{Error, Result};
