//! Discriminative fine-tuning of a tiny autoregressive model.
//!
//! The model scores answers with `s(y, x)`, either `log P(y|x)` or its
//! per-token mean. Training minimizes
//!
//! ```text
//! F(θ) = −(1/n) Σ_i s(y_i, x_i) + (τ/n) Σ_i log Σ_{y'} exp(s(y', x_i)/τ)
//! ```
//!
//! where the inner sum is estimated from negatives sampled offline from a
//! frozen base model and tracked per example by a log-domain moving average.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fcco;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod oracle;
pub mod pool;
pub mod task;

pub use error::{Error, Result};
