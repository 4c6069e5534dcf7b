//! Reverse-mode automatic differentiation over dense `f64` arrays.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, FdReport, RELATIVE_FLOOR};
pub use optim::{adam_step, OptimizerState};
pub use params::{xavier, Bound, ParamId, ParamStore};
pub use tape::{grad, Gradients, Tape, Var};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use tape::{sigmoid, softmax_in_place};
