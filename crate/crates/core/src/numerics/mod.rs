//! Dense `f64` tensors, a reverse-mode tape, neural building blocks and the
//! optimizer.

mod gemm;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod sampling;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, CheckOptions, CheckReport, Objective, ParamCheck};
pub use optim::Adam;
pub use params::{GradMap, ParamStore};
pub use sampling::bilinear_sample;
pub use tape::{conv_out, softmax_rows, Gradients, LevelShape, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
