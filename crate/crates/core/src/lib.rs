//! Densely guided knowledge distillation across teacher-assistant ladders.
//!
//! A ladder of models with decreasing capacity is trained top-down. The
//! teacher learns from labels; each later model learns from the labels plus
//! the softened outputs of the models above it, either only the one directly
//! above (`chain`), all of them (`dense`), or all of them with a random
//! subset dropped per mini-batch (`dense_stochastic`).

pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod orchestrator;
pub mod rng;
pub mod tensor;
pub mod zoo;

pub use error::{Error, ErrorCategory, Result};
