//! Small dense-tensor engine with tape-based reverse-mode autodiff.
//!
//! All arithmetic is `f64`. Kernels parallelize over independent output
//! chunks (batch elements, planes or row blocks) through [`par`]; the chunking
//! is identical with and without the `parallel` feature, so both paths give
//! bit-identical results.

mod error;
pub mod gemm;
pub mod gradcheck;
pub mod ops;
pub mod par;
mod param;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use param::{join_name, Module, Param, ParamKind};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;
