//! Reverse-mode differentiable kernel.
//!
//! A [`Graph`] is built once per batch, evaluated against a [`ParamStore`],
//! then swept backwards to fill parameter gradients. The same code runs in
//! `f32` for training and `f64` for [`finite_difference_check`].

mod array;
pub mod gradcheck;
mod graph;
pub mod kernels;

pub use array::{Array, ParamId, ParamStore, Parameter, Real, ShapeError};
pub use gradcheck::{finite_difference_check, GradCheckReport, ParamCheck};
pub use graph::{Axis, Graph, GraphError, NodeId, LAYER_NORM_EPS};
