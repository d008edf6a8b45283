//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Ops return
//! [`Var`] handles into the tape; [`Tape::backward`] sweeps the recorded
//! nodes in reverse and accumulates gradients into leaf nodes. Model
//! parameters live outside the tape in a [`ParameterSet`] and are bound as
//! leaves at the start of each pass.

mod kernels;
mod params;
mod tape;
mod tensor;

pub use params::{Bound, NamedTensor, ParamId, ParamRole, Parameter, ParameterSet};
pub use tape::{softmax_rows, BatchNormState, Tape, Var, BN_EPS, BN_MOMENTUM, LN_EPS};
pub use tensor::Tensor;

/// Whether stochastic layers and batch statistics are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
