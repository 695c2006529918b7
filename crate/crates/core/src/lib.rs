//! Few-shot image classification by object-level relation learning.
//!
//! An image is encoded by a small convolutional stack into a `d×d` grid of
//! object vectors. Every object of a support image is paired with every
//! object of a query image, each pair is mapped through a shared relation
//! MLP, the relation vectors are summed, and a similarity head turns the sum
//! into a score in `(0, 1)`. Queries take the label of the most similar
//! support class.

pub mod cli;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use model::{Model, ModelConfig, ObjectGrid};
pub use tensor::{Graph, Tensor, Var};
