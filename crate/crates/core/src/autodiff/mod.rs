//! Reverse-mode automatic differentiation over a closed set of primitives:
//! matmul, add, concat, element-wise mul, sigmoid, tanh, softmax, max over an
//! axis, embedding lookup, valid-padding conv1d, cross-entropy from logits,
//! scale and slice. Model code composes only these.

mod adam;
mod gradcheck;
mod tape;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_params, ParamCheckOptions};
pub use tape::{Backward, Tape, Var};

#[cfg(test)]
pub(crate) use tape::softmax_in_place;
