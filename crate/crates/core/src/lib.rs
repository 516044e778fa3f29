//! Unified multi-task targeting model for ads and promotions.
//!
//! A shared encoder over user, content, context and creative features feeds one tower per task.
//! Training masks ad impressions out of promotion-only towers and balances mini-batches between
//! the two impression sources. The crate also carries a synthetic impression generator, offline
//! metrics, an ablation harness and a paired replay simulator.

pub mod dataio;
pub mod evaluation;
pub mod experiments;
pub mod model;
pub mod numerics;
pub mod training;

pub use model::{Source, Task};
