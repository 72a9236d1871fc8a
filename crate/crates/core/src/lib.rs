//! Multi-agent decision transformer for traffic signal control.
//!
//! The pipeline runs from a queue-based simulator ([`sim`]) through offline
//! data collection ([`dataset`]) and sequence-model training ([`trainer`])
//! to closed-loop evaluation ([`evaluator`]).

pub mod check;
pub mod dataset;
mod error;
pub mod evaluator;
pub mod experiment;
pub mod io;
pub mod model;
pub mod policies;
pub mod sim;
pub mod topology;
pub mod trainer;

pub use error::{Error, Result};
pub use madt_tensor as tensor;
