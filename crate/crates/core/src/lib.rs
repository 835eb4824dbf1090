//! Incremental sequence-to-action NL2SQL parsing for WikiSQL-style data.

pub mod cli;
pub mod dataset;
pub mod decoding;
pub mod error;
pub mod evalharness;
pub mod oracles;
pub mod policy;
pub mod query_model;
pub mod sql_engine;
pub mod synth;
pub mod training;
pub mod transitions;
mod util;

pub use error::{Error, Result};
