//! Dense tensors, differentiable primitives, a gradient tape and Adam.

pub mod activation;
pub mod adam;
pub mod attention;
pub mod conv;
pub mod embedding;
pub(crate) mod fmath;
pub(crate) mod linalg;
pub mod norm;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use embedding::sinusoidal_embedding;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
