//! Contextual-sparsity decoding on a deterministic toy transformer, with a
//! periodic full-model corrector, speculation trees, and the efficiency
//! algebra used to evaluate them.

pub mod analytics;
pub mod corrector;
pub mod error;
pub mod experiment;
pub mod kvcache;
pub mod model;
pub mod probs;
pub mod rng;
pub mod session;
pub mod sparsity;
pub mod spectree;
pub mod tokenizer;

pub use error::{Error, Result};
