//! Dense tensors, the numeric kernels the network needs, and a tape-based
//! reverse-mode graph over them.

mod array;
pub mod conv;
pub mod graph;
pub mod linalg;
pub mod norm;
mod scalar;

pub use array::{Tensor, MAX_RANK};
pub use graph::{Grads, Graph, Op, Var};
pub use scalar::{gemm, DType, Scalar};
