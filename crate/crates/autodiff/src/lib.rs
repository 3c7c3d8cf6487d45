//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records ops as they run; [`Graph::backward`] sweeps the tape in
//! reverse and returns [`Gradients`] that can be added into a [`ParamStore`]
//! and applied with [`Adam`]. Everything is generic over [`Real`] so the same
//! model code runs in `f32` for training and `f64` for gradient checks.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod nn;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use nn::{Linear, SeedStream};
pub use optim::Adam;
pub use params::{xavier_init, Gradients, ParamId, ParamStore, Parameter};
pub use scalar::Real;
pub use tensor::{argmax, Tensor};
