//! Asymmetric LoRA unlearning with token-entropy routing on a miniature
//! transformer.

pub mod adapters;
pub mod checkpoint;
pub mod corpus;
pub mod entropy;
pub mod evalkit;
pub mod error;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod tokenizer;
pub mod unlearn;

pub use error::{AlterError, Result};
