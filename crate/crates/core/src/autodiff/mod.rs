//! Dense tensors, a recording tape with reverse-mode differentiation, a
//! deterministic random stream and a finite-difference gradient checker.

mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, GroupError};
pub use rng::RngState;
pub use tape::{Binary, Reduce, Tape, Unary, Var};
pub use tensor::Tensor;
