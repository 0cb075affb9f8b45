//! Dynamic visual prompting for toy-scale language models.
//!
//! A cross-attention generator turns text-conditioned queries over frozen
//! visual features into a handful of prompt tokens, which are spliced into a
//! transformer at a chosen layer. A gradient-bandit controller searches that
//! layer, and bottleneck adapters restrict training to a small parameter
//! subset.

pub mod adapter;
pub mod bandit;
mod binio;
pub mod error;
pub mod numerics;
pub mod prompt;
pub mod tasks;
pub mod train;
pub mod transformer;

pub use error::{DvpError, Result};
pub use numerics::{Tensor, Var};
