//! Dense `f64` tensors and a recorded graph with reverse-mode gradients.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, LeafCheck};
pub use graph::{CustomOp, Evaluation, Gradients, Graph, LeafKind, Var};
pub use tensor::Tensor;
