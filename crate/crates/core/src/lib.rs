//! Learned obfuscators for privacy-preserving inference against a frozen,
//! shared classifier.
//!
//! A participant runs a small network that maps a 784-value MNIST sample to
//! another 784-value vector, then submits that vector to a coordinator that
//! serves one pre-trained LeNet for both raw and obfuscated inputs.

pub mod coordinator;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod fnv;
pub mod models;
pub mod nn;
pub mod participant;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
