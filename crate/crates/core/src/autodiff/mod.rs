//! Small reverse-mode automatic differentiation engine over dense tensors.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport, ParamCheck};
pub use graph::{Graph, Mode, Var, LAYER_NORM_EPS};
pub use params::{Param, ParamStore};
pub use tensor::Tensor;
