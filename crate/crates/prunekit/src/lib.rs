//! Training and pruning toolkit for small image classifiers.
//!
//! The library couples a minimal reverse-mode differentiation engine with an
//! elasticity-based sensitivity score: the relative change of the loss per
//! relative change of a parameter, `|∂L/∂θ · θ| / L`. Pruning applies that
//! score iteratively — unstructured over weights, structured over nodes, or
//! both pooled together — alongside magnitude and random baselines, with
//! analytic FLOPS/storage estimators for reporting.

pub mod data;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod prune;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
