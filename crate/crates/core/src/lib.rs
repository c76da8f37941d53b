//! Early co-classification of tangled key-value sequences.

pub mod cli;
pub mod config;
pub mod datasets;
pub mod ectl;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod gradsuite;
pub mod kvrl;
pub mod model;
pub mod numerics;
pub mod sequence;
pub mod streaming;
pub mod training;

pub use error::{KvecError, Result};
pub use model::{KvecModel, ModelConfig};
