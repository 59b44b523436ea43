//! Dense tensors and the reverse-mode autodiff engine.

pub mod kernels;
mod params;
mod real;
mod tape;
mod tensor;

pub use kernels::PoolAxis;
pub use params::{Param, ParamId, ParamKind, ParamStore};
pub use real::{matmul, DType, Real};
pub use tape::{sigmoid, BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;
