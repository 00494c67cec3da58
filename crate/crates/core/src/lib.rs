#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod imaging;
mod interp;
pub mod model;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
