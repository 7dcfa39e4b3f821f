// SPDX-License-Identifier: MIT OR Apache-2.0

//! Question/context ordering and input emphasis for reading comprehension.
//!
//! The crate renders question-first and context-first prompts, emphasizes
//! the question and/or context either with marker strings or by steering
//! attention heads of a small decoder-only transformer, profiles heads to
//! pick the steering set, and scores generations with substring accuracy,
//! perplexity and a closed-book known/unknown split.

pub mod config;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod profiling;
pub mod prompting;
pub mod steering;
pub mod tokenizer;
pub mod transformer;

pub use error::{Error, Result};
