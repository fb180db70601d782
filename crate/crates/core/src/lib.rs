//! Continual test-time adaptation on a toy classifier, plus an asymmetric
//! co-optimal transport solver.

pub mod ascoot;
pub mod cda;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod model;
pub mod rfp;
pub mod rng;
pub mod stream;

pub use error::{Error, Result};
