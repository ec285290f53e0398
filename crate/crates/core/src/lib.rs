//! Class-incremental learning with importance-weighted feature consolidation.

// `!(x >= 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boundslab;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod importance;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
