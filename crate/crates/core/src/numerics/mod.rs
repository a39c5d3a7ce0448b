//! Dense `f64` tensors, a reverse-mode tape and a finite-difference checker.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{gelu, CustomVjp, Tape, Var, MASK_BIAS, PROB_FLOOR};
pub(crate) use tape::softmax_into;
pub use tensor::Tensor;

/// Softmax of a plain slice, outside any tape.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(row.len());
    softmax_into(row, &mut out);
    out
}
