//! Remaining-time prediction for business processes.
//!
//! An event log is cut into prefixes, each prefix becomes a small directed
//! graph over its event classes, and a graph transformer (GIN message
//! passing in parallel with self-attention) regresses the remaining time.

pub mod autodiff;
pub mod encodings;
pub mod error;
pub mod evaluation;
pub mod eventlog;
pub mod graphbuild;
pub mod model;
pub mod prefixing;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorClass, Result};
