//! Minimal dense arrays with reverse-mode differentiation.

mod array;
pub mod gradcheck;
mod graph;

pub use array::{matmul, Array};
pub use graph::{log_softmax_in_place, log_sum_exp, softmax_in_place, Graph, Var};
