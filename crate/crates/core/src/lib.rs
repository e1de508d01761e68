pub mod adversary;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod evaluation;
pub mod graph;
pub mod models;
pub mod optim;
pub mod pyramid;
pub mod tensor;
pub mod training;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
