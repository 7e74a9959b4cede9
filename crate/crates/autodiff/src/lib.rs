//! Minimal tensor library with a reverse-mode tape, sized for small 3D U-shaped networks.

pub mod conv;
mod direct;
pub mod error;
pub mod fd;
pub mod graph;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TensorError};
pub use fd::{finite_difference_gradient, max_relative_error};
pub use graph::{channel_moments, Graph, NodeId, OpKind};
pub use scalar::Scalar;
pub use tensor::Tensor;
