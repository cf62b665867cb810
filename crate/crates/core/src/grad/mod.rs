//! Minimal reverse-mode differentiation for the operator set used by the
//! attention, fusion, pipeline, and loss code, plus finite-difference
//! verification and first-order optimizers.

mod check;
mod optim;
mod params;
mod tape;
mod tensor;

pub use check::{finite_diff_check, relative_error, GradCheckConfig, GradCheckReport, TensorCheck};
pub use optim::{sgd_step, Adam};
pub use params::{ParamStore, Session};
pub use tape::{matmul, precision, set_precision, Gradients, NodeId, Precision, Tape, Unary, NO_ROW};
pub(crate) use tape::{gelu, sigmoid};
pub use tensor::Tensor;
