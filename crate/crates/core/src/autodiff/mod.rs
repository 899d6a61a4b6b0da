//! Reverse-mode differentiation over a tape of tensor operations, plus
//! finite-difference gradient checking.

mod gradcheck;
mod graph;

pub use gradcheck::*;
pub use graph::*;
