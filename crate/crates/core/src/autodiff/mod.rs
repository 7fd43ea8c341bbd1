//! Reverse-mode automatic differentiation and its finite-difference oracle.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck, Probe};
pub use tape::{Gradients, Tape, Var};

