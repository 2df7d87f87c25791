//! Learning local patch descriptors from weakly-labeled bags of keypoints.

// `!(x > 0.0)` rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bag_match;
pub mod data;
pub mod error;
pub mod net;
pub mod retrieval;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
