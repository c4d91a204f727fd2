//! Project-level domain adaptation for sequence-to-sequence program repair
//! models: corpus partitioning, a pluggable backend contract, adaptation
//! methods, bug synthesis, evaluation and a study orchestrator.

pub mod adapter;
pub mod backend;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod methods;
pub mod study;
pub mod synth;
pub mod toy;

pub use error::{Error, Result};
