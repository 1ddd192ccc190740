//! Clarification engine for complex user intents.
//!
//! An instruction is mapped to an intent schema (elements plus their
//! prerequisites), the schema is layered, and the user is asked one table
//! of questions per layer before a final answer is produced. Rollouts of
//! simulated users score each turn, and the best trajectories become
//! fine-tuning data.

pub mod backend;
pub mod cid;
pub mod clarifier;
pub mod decomposer;
pub mod evolution;
pub mod metrics;
pub mod prompts;
pub mod protocol;
mod repair;
pub mod reward;
pub mod sampler;
pub mod scalar;
pub mod similarity;
pub mod text;

pub use scalar::{Rational, Scalar};
