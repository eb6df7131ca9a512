//! Dense matrices, a reverse-mode tape, the parameter store and a
//! finite-difference gradient oracle.

pub mod gradcheck;
mod graph;
mod params;
mod tensor;

#[cfg(test)]
mod op_tests;

pub use gradcheck::{finite_difference_check, finite_difference_check_on, relative_error, CheckReport, Evaluation, DEFAULT_EPS, RELATIVE_FLOOR};
pub use graph::{Axis, BatchStats, Gradients, Graph, NodeId, LEAKY_SLOPE};
pub(crate) use graph::log_sum_exp;
pub use params::{ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
