//! Layer-level membership-privacy auditing and privacy-preserving
//! retraining for staged convolutional networks.

pub mod alloc;
pub mod data;
pub mod error;
pub mod harness;
pub mod model_zoo;
pub mod mia;
pub mod nn;
pub mod pptp;
pub mod probe;
pub mod profiler;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
