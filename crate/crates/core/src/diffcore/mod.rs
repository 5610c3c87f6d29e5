//! Tensors, a reverse-mode tape, and the differentiable ops the model is built from.

mod gradcheck;
mod params;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport, GRAD_FLOOR};
pub use params::{Bound, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
