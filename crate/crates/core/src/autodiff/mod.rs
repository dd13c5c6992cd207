//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] evaluates primitives eagerly and records them; calling
//! [`Graph::backward`] on a scalar node accumulates gradients into every
//! node that requires them. Values are `f64` unless a graph is built over
//! `f32`.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{
    check_many, finite_difference_check, relative_error, GradCheckReport, MAX_SKIPPED_FRACTION, REL_ERROR_FLOOR,
};
pub use graph::{Graph, Primitive, Var};
pub use tensor::{Element, Tensor};

#[cfg(test)]
mod tests;
