//! Dense numeric core: value grids, a taped primitive set with reverse-mode
//! differentiation, and a finite-difference gradient checker.

mod gradcheck;
mod grid;
pub mod kernels;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckEntry, GradCheckReport};
pub use grid::{Real, ValueGrid};
pub use tape::{AttentionSpec, RelativeBias, Tape, Var, RMS_EPS};

#[cfg(test)]
mod tests;
