//! Knowledge-graph-based medication recommendation: data model, graph
//! construction, the neural model, training objectives, evaluation and the
//! end-to-end harness.

pub mod cohort;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod harness;
pub mod kg;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod train;

pub use error::{CoreError, Result};
