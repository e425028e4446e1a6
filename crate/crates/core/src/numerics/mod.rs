//! Dense tensors, a reverse-mode tape, parameter sets and gradient checking.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use optim::AdamW;
pub use params::{Bound, ParameterSet};
pub use tape::{sigmoid, softmax_values, Gradients, Tape, Var};
pub use tensor::Tensor;
