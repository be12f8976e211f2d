//! Observed-Fisher characterization of trained local minima for small
//! feed-forward classifiers: the `γ̂` metric and its competitors, a PAC-Bayes
//! bound driven by the Fisher log-determinant, a trace-surrogate regularizer,
//! finite-difference verification helpers and desk-scale experiment drivers.

pub mod bound;
pub mod error;
pub mod experiments;
pub mod fisher;
pub mod linalg;
pub mod net;
pub mod oracle;
pub mod persist;
pub mod regularizer;

pub use error::{Error, Result};
