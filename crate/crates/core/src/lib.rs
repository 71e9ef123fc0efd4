//! Distributionally robust covariance steering with an L1 adaptive
//! augmentation, plus the Monte Carlo machinery used to check it.

// `!(x > 0.0)` is how NaN gets rejected, and index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

// Links the system BLAS/LAPACK used by the semidefinite cone.
extern crate openblas_src;

pub mod conic;
pub mod dynamics;
pub mod error;
pub mod l1drac;
pub mod linalg;
pub mod pipeline;
pub mod planner;
pub mod render;
pub mod risk;
pub mod rng;
pub mod safety;
pub mod scenario;
pub mod sim;
pub mod uncertainty;
pub mod wasserstein;

pub use error::{Error, Result};
