//! Minimal reverse-mode autodiff for the critic network.
//!
//! [`graph`] holds the differentiation tape and the op set (closed under
//! differentiation, so second-order terms like the gradient penalty fall out
//! of the same machinery); [`kernels`] holds the deterministic numeric
//! routines behind the heavy ops; [`store`] names, collects, and checkpoints
//! parameters.

pub mod graph;
pub mod kernels;
pub mod store;

pub use graph::{Graph, NnError, Shape, Tensor};
pub use store::{Param, ParamStore, StoreError};
