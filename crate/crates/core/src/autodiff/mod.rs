//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod gemm;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub(crate) use gemm::gemm;
pub use gradcheck::{gradcheck, gradcheck_many, relative_error, GradCheckOptions, GradCheckReport, Stencil};
pub use params::{BoundParams, ParamSet, GOWT_MAGIC};
pub use tape::{Function, Gradients, Tape, Var, NORMALIZE_EPS};
pub use tensor::Tensor;
