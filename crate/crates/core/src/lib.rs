//! Deterministic simulator for federated cross-modal fusion training.
//!
//! Simulated satellite clients each hold one modality of a co-registered
//! scene. Paired clients exchange rank-K SVD factorisations of their feature
//! maps (binary16 on the wire) and the server aggregates their models with
//! sample-count weights.

pub mod codec;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tensor, TensorBundle};
