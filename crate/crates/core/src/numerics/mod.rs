//! Dense tensors, a define-by-run gradient tape, the Adam optimizer and a
//! finite-difference gradient checker.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{gradient_check, GradCheck, RELATIVE_ERROR_FLOOR};
pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::softmax_in_place;
pub use tensor::{Scalar, Tensor};
