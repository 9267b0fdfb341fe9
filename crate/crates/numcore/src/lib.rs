//! Minimal dense-tensor and reverse-mode differentiation substrate.
//!
//! Everything is `f64` and single-threaded so that training runs are
//! bit-reproducible for a fixed seed.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{NumError, Result};
pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
