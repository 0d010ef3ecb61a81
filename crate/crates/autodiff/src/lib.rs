//! Tape-based reverse-mode autodiff over `f64` ndarrays, with the layers,
//! optimizer and finite-difference tooling used by the view-synthesis
//! models.
//!
//! Everything here is single-threaded and evaluation-order deterministic:
//! two runs with the same inputs produce bit-identical values, gradients and
//! parameter updates. That property is load-bearing — checkpoint resume and
//! frozen-weight audits compare raw bytes.

mod adam;
mod gradcheck;
mod graph;
pub mod nn;
mod ops_basic;
mod ops_conv;
mod ops_linalg;
mod ops_nn;
mod ops_sample;
mod store;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{central_difference, pick_coordinates, relative_error};
pub use graph::{Gradients, Graph, Tensor};
pub use store::{Param, ParamId, ParamStore, ParamTensors, StoreError};
