//! Out-of-distribution detection with per-class grouped Gaussian densities
//! over learned attribute vectors.
//!
//! A feature `z` is projected to an attribute `a`, split into `G`
//! contiguous groups, and scored against every in-distribution class by a
//! weighted sum of per-group Mahalanobis terms. The dataset score is the
//! best class score; a sample is accepted as in-distribution iff it reaches
//! the threshold `γ`.

// `!(x > 0.0)` is used deliberately so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attributes;
pub mod density;
pub mod error;
pub mod eval;
pub mod features;
pub mod io_util;
pub mod linalg;
pub mod synthetic;
pub mod trainer;

pub use error::{HvcmError, Result};
