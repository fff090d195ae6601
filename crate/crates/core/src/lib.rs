//! System-prompt optimization for question answering with textual gradients.
//!
//! A task model answers benchmark questions under an optimizable system
//! prompt. A backward engine critiques each answer against the gold label,
//! turns the critique into feedback on the response and then on the prompt,
//! and finally rewrites the prompt. Candidates are kept only when they score
//! strictly higher on a held-out dev set.
//!
//! The crate also carries the pieces needed to run baselines (zero-shot,
//! few-shot, chain-of-thought) over the same data and grade everything with
//! deterministic answer extraction.

pub mod datasets;
pub mod error;
pub mod extract;
pub mod gateway;
pub mod optimizer;
pub mod sampling;
pub mod strategies;
pub mod textgrad;

pub use error::{Error, ErrorCategory};
