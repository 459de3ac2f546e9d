//! Training-free model merging by locating, electing and disjointing
//! task-critical weights, with baseline mergers, overlap diagnostics and a
//! small feed-forward lab that produces gradients and fine-tuned models.

pub mod analysis;
pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod led;
pub mod report;
pub mod scoring;
pub mod toygrad;

pub use error::{Error, Result};
