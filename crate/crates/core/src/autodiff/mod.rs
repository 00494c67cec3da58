//! Reverse-mode differentiation over the handful of tensor operations a
//! convolutional alignment stage needs.
//!
//! Operations are recorded on a [`Graph`] as they are evaluated; calling
//! [`Graph::backward`] on a scalar node fills in gradients for every node
//! that depends on a [`Graph::param`] leaf. The element type is generic so
//! the same network can run in `f32` for training and in `f64` for
//! finite-difference checks.

mod batch_norm;
pub mod gradcheck;
mod graph;
mod tensor;

pub use batch_norm::{BatchNormState, BatchStats, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
pub use gradcheck::{
    finite_difference_check, graph_objective, graph_objective_unfrozen, Evaluation, GradCheckConfig, GradCheckReport,
};
pub use graph::{Branches, BnMode, Graph, Mode, PointTarget, Var};
pub use tensor::{Real, Tensor};
