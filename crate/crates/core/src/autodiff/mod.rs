//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records one forward pass. [`Tape::backward`] replays it in
//! reverse under a [`BackwardPolicy`], which selects between exact
//! gradients, DeepLIFT-Rescale multipliers and GIM-modified gradients.

mod backward;
mod tape;
mod tensor;

pub use backward::{
    BackwardMode, BackwardPolicy, Gradients, ReferenceActivations, DEFAULT_GIM_TEMPERATURE,
    DEFAULT_NEAR_ZERO_DELTA,
};
pub use tape::{Axis, GateOperand, LeafKind, NodeId, Op, OpKind, SoftmaxRole, Tape, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
