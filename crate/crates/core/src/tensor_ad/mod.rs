//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
pub use tape::{sigmoid, softplus, BinaryOp, CustomOp, Reduce, Tape, UnaryOp, Var};
pub use tensor::Tensor;


/// Softmax of a plain vector, max-shifted.
pub fn softmax_stable(logits: &Tensor) -> crate::Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let y = tape.softmax(x)?;
    Ok(tape.value(y).clone())
}
