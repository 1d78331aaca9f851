//! Cyclic prune / re-initialize training for small ConvNets.
//!
//! The crate trains `C^n(X)` networks (`n` conv + ReLU blocks of `X` filters, one
//! fully-connected layer, softmax) and periodically drops the least useful filters, trains
//! the remaining sub-network, then brings the dropped filters back re-initialized orthogonal
//! to the surviving ones. Filter usefulness comes from any of the metrics in [`ranking`],
//! including inter-filter orthogonality.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod network;
pub mod optim;
pub mod ranking;
pub mod scheduler;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use network::{Model, ModelSpec, PruneMask};
pub use tensor::Tensor;
