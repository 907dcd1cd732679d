//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Leaves
//! created with [`Tape::leaf`] are tracked; [`Tape::backward`] replays the
//! tape in reverse and accumulates their gradients. Leaves created with
//! [`Tape::constant`] are not tracked, and operations whose inputs are all
//! untracked store no backward closure, so a tape of constants doubles as a
//! cheap inference context.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_at, program, rel_error, GradCheck};
pub use ops::{softplus, NORM_FLOOR};
#[allow(unused_imports)]
pub(crate) use ops::gemm;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
