//! Dense rank-4 grids and a minimal reverse-mode autodiff tape over them.

mod conv;
mod graph;
mod grid;
pub mod special;

pub use conv::Padding;
pub use graph::{Binary, Gradients, Graph, NodeId, Unary};
pub use grid::{Grid, Shape};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("reduction over zero elements")]
    EmptyReduction,
}
