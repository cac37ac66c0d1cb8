//! Differentiable operations. Each file adds methods to [`Var`](crate::Var)
//! and pairs a forward kernel with its backward kernel.

mod attention;
mod conv;
mod elementwise;
mod matmul;
mod norm;
mod pool;
mod resize;
mod shape;

pub use conv::conv2d_forward;
pub use elementwise::sigmoid;
pub use norm::BatchStats;
pub use resize::bilinear_plane;
