//! One-shot, retraining-free structured pruning for transformer encoders
//! and small CNNs.
//!
//! Every prunable unit (attention head, FFN neuron, token position, conv
//! channel) is scored by the perturbation its removal causes in all
//! downstream block features plus the output logits. A budgeted search then
//! turns the scores into a mask that fits a FLOPs target, optionally with a
//! per-block token reduction schedule.

pub mod cli;
pub mod cnn;
pub mod config;
pub mod cost;
pub mod error;
pub mod eval;
pub mod importance;
pub mod io;
pub mod model;
pub mod search;
pub mod tensor;
pub mod toy;

pub use error::{ContainerError, Error, Result};
