//! Multi-task attention MIL training engine.
//!
//! Bags of instance features are encoded by a shared MLP, pooled by a shared
//! multi-head attention module and decoded by one linear head per task. All
//! heads are trained jointly by accumulating per-task gradients into a single
//! AdamW step.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod pooling;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
