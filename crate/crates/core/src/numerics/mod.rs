//! Tensors, reverse-mode differentiation, seeded random streams and
//! finite-difference gradient checks.

pub mod gradcheck;
pub mod graph;
pub mod rng;
pub mod tensor;

pub use graph::{Axis, Gradients, Graph, Var};
pub use rng::{xavier_uniform, SeedTree, StreamRng};
pub use tensor::Tensor;
