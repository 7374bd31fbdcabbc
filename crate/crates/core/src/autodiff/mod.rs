//! Minimal reverse-mode automatic differentiation.

pub mod gradcheck;
mod graph;
mod params;
mod real;

pub use graph::{numel, BatchStats, Graph, NormMode, OpKind, ParamKey, TensorId, BN_EPS, NORM_EPS};
pub use params::{accumulate_grads, BoundGroup, ParamGroup, ParamTensor, UpdateRule};
pub use real::{Precision, Real, Strides};
