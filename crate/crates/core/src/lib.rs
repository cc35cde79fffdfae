//! Structured pruning of convolution + transformer networks with Hard
//! Concrete gates and an augmented-Lagrangian sparsity controller.

pub mod autodiff;
pub mod controller;
pub mod error;
pub mod extract;
pub mod gates;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod sparsity;
pub mod sweep;

pub use autodiff::Tensor;
pub use error::{Error, Result};
