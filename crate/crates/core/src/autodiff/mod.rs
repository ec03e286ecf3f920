//! Reverse-mode automatic differentiation over dense 2-D tensors.

mod gradcheck;
mod tape;

pub use gradcheck::{finite_difference_check, relative_error, GradCheck, GradCheckReport, ABS_FLOOR};
pub use tape::{BackwardFault, BatchNormMode, BatchStats, Gradients, Primitive, Tape, Var};

#[cfg(test)]
mod primitive_checks;
