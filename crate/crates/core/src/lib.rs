//! Temporal-association machinery for online video instance segmentation:
//! clip-level matching costs, global and locally propagated instance
//! assignment, the spatio-temporal enhancement step, synthetic clips and a
//! video AP evaluator.

pub mod assignment;
pub mod cost;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod ste;
pub mod synth;

pub use error::{Error, Result};
