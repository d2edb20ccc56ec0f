//! Reproducible command-line runs over the `tcovis-core` library: corpus
//! generation, assignment audits, enhancement traces, evaluation and
//! benchmarks. Every command except `bench` is a pure function of its
//! inputs and seed, independent of the worker count.

pub mod commands;
pub mod config;

pub use commands::*;
pub use config::{parse_weights, DemoConfig, RunConfig};
