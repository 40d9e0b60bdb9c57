//! Dense tensors and reverse-mode differentiation for small models.

mod model;
mod ops;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use model::{Batch, Model};
pub use ops::{
    forward, grad, hessian, hvp, per_example_grads, per_example_grads_replay, Forward,
    DEFAULT_HESSIAN_CAP,
};
pub(crate) use ops::{forward_values, grad_values, per_example_grad_rows};
pub use params::{dot, ParamLayout, ParamVector, Segment};
pub use scalar::{Dual, Scalar};
pub use tape::{Adjoints, NodeId, Tape};
pub use tensor::Tensor;
