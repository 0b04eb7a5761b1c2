//! Reverse-mode differentiable computation engine: dense `f64` arrays, an
//! operation tape with backward, an Adam optimizer, and a finite-difference
//! gradient checker. Every model in this crate builds its forward pass from
//! these primitives.

mod adam;
mod array;
mod gradcheck;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use array::Array;
pub use gradcheck::{compare_gradients, grad_check, numeric_gradient, GradCheckReport};
pub use tape::{NodeId, Tape};
