//! Structured pruning of small neural networks by greedy spectral subset
//! selection, with an optional source/target moment-matching regularizer,
//! low-rank baselines and an experiment pipeline.

pub mod actstats;
pub mod error;
pub mod linalg;
pub mod lowrank;
pub mod netmodel;
pub mod pipeline;
pub mod spectral;
pub mod tensor;
pub mod trainkit;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use netmodel::Network;
pub use tensor::Tensor;
