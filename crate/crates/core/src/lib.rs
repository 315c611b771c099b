//! Layer-wise sparse SGD: a small neural-network training library with
//! selection-aware truncated back-propagation, re-initialization and
//! gradient-activity analysis, and a seeded experiment runner.

mod error;

pub mod analysis;
pub mod data;
pub mod experiment;
pub mod model;
pub mod optim;
pub mod policy;
pub mod tensor;

pub use error::{Error, Result};
