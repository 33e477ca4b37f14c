//! Small dense-tensor toolkit with reverse-mode differentiation.
//!
//! Everything is deliberately explicit: tensors are row-major, shapes must
//! match exactly (the single exception is [`Tape::add_row`]), and the tape
//! replays in a fixed order so gradients are bit-reproducible.

mod error;
mod gradcheck;
mod tape;
mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{grad_check, grad_check_many, GradCheckReport, ABS_FLOOR};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
