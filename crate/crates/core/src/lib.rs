//! Incremental user embeddings: per-user history embeddings accumulated into
//! momentum-updated profile vectors, fused by an upper transformer and used
//! to classify incoming text events, plus batch baselines for comparison.

pub mod data;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod history;
pub mod models;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Matrix;
