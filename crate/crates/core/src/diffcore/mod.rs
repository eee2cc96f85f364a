//! Deterministic reverse-mode array engine: tensors, the gradient tape,
//! parameter storage, Adam, finite-difference checks and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;


pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{check_params, grad_check, relative_error, GradCheckConfig, GradCheckReport};
pub use graph::{pooled_len, Gradients, Graph, Padding, Var};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
