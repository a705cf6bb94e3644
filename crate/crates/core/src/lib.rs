//! Numerical core of a 3D deformable transformer for action recognition,
//! built for desk-scale experiments: an f64 autograd engine, deformable and
//! stride attention blocks, a synthetic action dataset, training, and
//! verification harnesses with full-attention oracles.

pub mod attention;
pub mod deform;
pub mod error;
pub mod stride;
pub mod tensor;
pub mod window;

pub use error::{Error, Result};
pub use tensor::{no_grad, OpCounter, Tensor};
